//! Parameter storage, initialization and the layer building blocks shared by
//! the encoder, decoder and region proposal network.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{AttentionMask, Graph, ParamKey, Var};
use crate::tensor::Matrix;

/// Named parameter matrices, addressed by the index handed out at build time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.values.iter().map(Matrix::shape).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    fn push(&mut self, name: String, value: Matrix) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let i = self.values.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        i
    }

    /// Overwrite values from `(name, matrix)` pairs. Every parameter must be
    /// supplied exactly once with a matching shape.
    pub fn load_named(&mut self, entries: Vec<(String, Matrix)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, value) in entries {
            let i = self
                .index_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if self.values[i].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
            if !value.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")));
            }
            self.values[i] = value;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter `{}`", self.names[i])));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

/// Multi-head attention projections. Queries come in at the query stream's
/// width and the output is projected back to it; keys and values may come
/// from a stream of a different width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mha {
    pub wq: Linear,
    /// No bias: a key bias shifts every score of a row equally and never
    /// receives gradient.
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

/// Builds a [`ParamSet`] while handing out layer layouts.
///
/// Weights are `U(−1/√fan_in, 1/√fan_in)`, biases zero, layer-norm gains one,
/// embeddings `U(−1, 1)`.
pub struct ParamBuilder {
    set: ParamSet,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            set: ParamSet::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound));
        self.set.push(name.to_string(), m)
    }

    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let rng = &mut self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0));
        self.set.push(name.to_string(), m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> usize {
        self.set.push(name.to_string(), Matrix::filled(rows, cols, value))
    }

    pub fn linear(&mut self, prefix: &str, inputs: usize, outputs: usize, bias: bool) -> Linear {
        let w = self.weight(&format!("{prefix}.w"), inputs, outputs);
        let b = bias.then(|| self.constant(&format!("{prefix}.b"), 1, outputs, 0.0));
        Linear { w, b }
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) -> LayerNorm {
        LayerNorm {
            gain: self.constant(&format!("{prefix}.gain"), 1, width, 1.0),
            bias: self.constant(&format!("{prefix}.bias"), 1, width, 0.0),
        }
    }

    /// `d_q`: query stream width, `d_kv`: key/value stream width, `d`: internal width.
    pub fn mha(&mut self, prefix: &str, d_q: usize, d_kv: usize, d: usize, heads: usize) -> Mha {
        Mha {
            wq: self.linear(&format!("{prefix}.wq"), d_q, d, true),
            wk: self.linear(&format!("{prefix}.wk"), d_kv, d, false),
            wv: self.linear(&format!("{prefix}.wv"), d_kv, d, true),
            wo: self.linear(&format!("{prefix}.wo"), d, d_q, true),
            heads,
        }
    }

    pub fn ffn(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Ffn {
        Ffn {
            l1: self.linear(&format!("{prefix}.l1"), d_in, hidden, true),
            l2: self.linear(&format!("{prefix}.l2"), hidden, d_out, true),
        }
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

/// One network's parameters placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
    pub dropout: Option<Dropout>,
}

impl Bound {
    /// `tag = None` binds the parameters as constants (frozen network).
    pub fn new<'p>(g: &mut Graph<'p>, params: &'p ParamSet, tag: Option<u32>) -> Self {
        let vars = params
            .values()
            .iter()
            .enumerate()
            .map(|(index, m)| match tag {
                Some(tag) => g.param(ParamKey { tag, index }, m),
                None => g.frozen_param(m),
            })
            .collect();
        Self { vars, dropout: None }
    }

    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        self
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn linear(&self, g: &mut Graph, l: &Linear, x: Var) -> Var {
        g.linear(x, self.vars[l.w], l.b.map(|b| self.vars[b]))
    }

    pub fn layer_norm(&self, g: &mut Graph, ln: &LayerNorm, x: Var) -> Var {
        g.layer_norm(x, self.vars[ln.gain], self.vars[ln.bias])
    }

    /// Returns the projected output and the raw attention node (which holds
    /// the per-head weights).
    pub fn mha(
        &mut self,
        g: &mut Graph,
        p: &Mha,
        query: Var,
        source: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var, Var)> {
        let q = self.linear(g, &p.wq, query);
        let k = self.linear(g, &p.wk, source);
        let v = self.linear(g, &p.wv, source);
        let att = g.attention(q, k, v, p.heads, mask)?;
        let att_d = self.dropout(g, att);
        Ok((self.linear(g, &p.wo, att_d), att))
    }

    pub fn ffn(&mut self, g: &mut Graph, p: &Ffn, x: Var) -> Var {
        let h = self.linear(g, &p.l1, x);
        let h = g.relu(h);
        let h = self.dropout(g, h);
        self.linear(g, &p.l2, h)
    }

    /// Inverted dropout; identity when disabled.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(d) = self.dropout.as_mut() else {
            return x;
        };
        let (r, c) = g.value(x).shape();
        let keep = 1.0 - d.rate;
        let rng = &mut d.rng;
        let mask = Matrix::from_fn(r, c, |_, _| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        g.mul_const(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_initialization_rules() {
        let mut b = ParamBuilder::new(0);
        let l = b.linear("x", 16, 4, true);
        let ln = b.layer_norm("n", 4);
        let e = b.embedding("e", 5, 3);
        let p = b.finish();
        let bound = 0.25;
        assert!(p.get(l.w).as_slice().iter().all(|v| v.abs() <= bound));
        assert!(p.get(l.b.unwrap()).as_slice().iter().all(|&v| v == 0.0));
        assert!(p.get(ln.gain).as_slice().iter().all(|&v| v == 1.0));
        assert!(p.get(e).as_slice().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.name(l.w), "x.w");
        assert_eq!(p.index_of("n.bias"), Some(ln.bias));
    }

    #[test]
    fn load_named_checks_names_and_shapes() {
        let mut b = ParamBuilder::new(0);
        b.linear("x", 2, 2, false);
        let mut p = b.finish();
        assert!(p.load_named(vec![("x.w".into(), Matrix::zeros(2, 3))]).is_err());
        assert!(p.load_named(vec![]).is_err());
        assert!(p.load_named(vec![("y".into(), Matrix::zeros(2, 2))]).is_err());
        p.load_named(vec![("x.w".into(), Matrix::identity(2))]).unwrap();
        assert_eq!(p.get(0), &Matrix::identity(2));
    }

    #[test]
    fn dropout_is_identity_at_rate_zero_and_unbiased_otherwise() {
        let p = ParamSet::default();
        let mut g = Graph::new();
        let mut net = Bound::new(&mut g, &p, None).with_dropout(0.0, 1);
        let x = g.constant(Matrix::filled(50, 40, 1.0));
        assert_eq!(net.dropout(&mut g, x), x);
        let mut net = Bound::new(&mut g, &p, None).with_dropout(0.5, 1);
        let y = net.dropout(&mut g, x);
        let mean = g.value(y).as_slice().iter().sum::<f64>() / 2000.0;
        assert!((mean - 1.0).abs() < 0.1, "{mean}");
    }
}
