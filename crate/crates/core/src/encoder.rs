//! Feature projection, bimodal encoder blocks and the caption encoder.
//!
//! Every sub-layer is pre-normalized with a residual connection:
//!
//! ```text
//! Ā = A + MHA(LN(A), LN(A))           V̄ = V + MHA(LN(V), LN(V))
//! Ã = Ā + MHA(LN(Ā), LN(V̄))          Ṽ = V̄ + MHA(LN(V̄), LN(Ā))
//! A' = Ã + FFN(LN(Ã))                 V' = Ṽ + FFN(LN(Ṽ))
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttentionMask, Graph, Var};
use crate::nn::{Bound, Ffn, LayerNorm, Linear, Mha, ParamBuilder, ParamSet};
use crate::tensor::{sinusoidal_positions, Matrix};

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Raw feature widths.
    pub input_a: usize,
    pub input_v: usize,
    /// Encoder block count.
    pub blocks: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub ff_a: usize,
    pub ff_v: usize,
    pub heads: usize,
    /// Caption encoder width (teacher only); must equal the decoder width.
    pub d_c: usize,
    #[serde(default = "yes")]
    pub final_norm: bool,
    #[serde(default = "yes")]
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_a: 8,
            input_v: 16,
            blocks: 2,
            d_a: 16,
            d_v: 16,
            ff_a: 32,
            ff_v: 32,
            heads: 4,
            d_c: 16,
            final_norm: true,
            positional: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_a", self.input_a),
            ("input_v", self.input_v),
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("ff_a", self.ff_a),
            ("ff_v", self.ff_v),
            ("heads", self.heads),
            ("d_c", self.d_c),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        for (name, d) in [("d_a", self.d_a), ("d_v", self.d_v), ("d_c", self.d_c)] {
            if d % self.heads != 0 {
                return Err(Error::Config(format!(
                    "encoder.{name} = {d} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub ln_self_a: LayerNorm,
    pub self_a: Mha,
    pub ln_self_v: LayerNorm,
    pub self_v: Mha,
    pub ln_cross_a: LayerNorm,
    pub ln_cross_v: LayerNorm,
    /// Audio queries visual.
    pub cross_a: Mha,
    /// Visual queries audio.
    pub cross_v: Mha,
    pub ln_ff_a: LayerNorm,
    pub ff_a: Ffn,
    pub ln_ff_v: LayerNorm,
    pub ff_v: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayout {
    pub proj_a: Linear,
    pub proj_v: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub final_a: Option<LayerNorm>,
    pub final_v: Option<LayerNorm>,
}

impl EncoderLayout {
    pub fn build(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Self {
        let proj_a = b.linear("encoder.proj_audio", cfg.input_a, cfg.d_a, true);
        let proj_v = b.linear("encoder.proj_visual", cfg.input_v, cfg.d_v, true);
        let blocks = (0..cfg.blocks)
            .map(|n| {
                let p = format!("encoder.blocks.{n}");
                EncoderBlock {
                    ln_self_a: b.layer_norm(&format!("{p}.ln_self_audio"), cfg.d_a),
                    self_a: b.mha(&format!("{p}.self_attn_audio"), cfg.d_a, cfg.d_a, cfg.d_a, cfg.heads),
                    ln_self_v: b.layer_norm(&format!("{p}.ln_self_visual"), cfg.d_v),
                    self_v: b.mha(&format!("{p}.self_attn_visual"), cfg.d_v, cfg.d_v, cfg.d_v, cfg.heads),
                    ln_cross_a: b.layer_norm(&format!("{p}.ln_cross_audio"), cfg.d_a),
                    ln_cross_v: b.layer_norm(&format!("{p}.ln_cross_visual"), cfg.d_v),
                    cross_a: b.mha(&format!("{p}.cross_attn_audio"), cfg.d_a, cfg.d_v, cfg.d_a, cfg.heads),
                    cross_v: b.mha(&format!("{p}.cross_attn_visual"), cfg.d_v, cfg.d_a, cfg.d_v, cfg.heads),
                    ln_ff_a: b.layer_norm(&format!("{p}.ln_ff_audio"), cfg.d_a),
                    ff_a: b.ffn(&format!("{p}.ff_audio"), cfg.d_a, cfg.ff_a, cfg.d_a),
                    ln_ff_v: b.layer_norm(&format!("{p}.ln_ff_visual"), cfg.d_v),
                    ff_v: b.ffn(&format!("{p}.ff_visual"), cfg.d_v, cfg.ff_v, cfg.d_v),
                }
            })
            .collect();
        let with_final = cfg.final_norm && cfg.blocks > 0;
        Self {
            proj_a,
            proj_v,
            blocks,
            final_a: with_final.then(|| b.layer_norm("encoder.final_audio", cfg.d_a)),
            final_v: with_final.then(|| b.layer_norm("encoder.final_visual", cfg.d_v)),
        }
    }
}

/// Unimodal block used by the caption encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBlock {
    pub ln_self: LayerNorm,
    pub self_att: Mha,
    pub ln_ff: LayerNorm,
    pub ff: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionLayout {
    pub embed: usize,
    pub proj: Linear,
    pub blocks: Vec<CaptionBlock>,
    pub final_ln: LayerNorm,
}

impl CaptionLayout {
    pub fn build(b: &mut ParamBuilder, cfg: &EncoderConfig, vocab: usize, embed_dim: usize, ff: usize) -> Self {
        let embed = b.embedding("caption.embed", vocab, embed_dim);
        let proj = b.linear("caption.proj", embed_dim, cfg.d_c, true);
        let blocks = (0..cfg.blocks)
            .map(|n| {
                let p = format!("caption.blocks.{n}");
                CaptionBlock {
                    ln_self: b.layer_norm(&format!("{p}.ln_self"), cfg.d_c),
                    self_att: b.mha(&format!("{p}.self_attn"), cfg.d_c, cfg.d_c, cfg.d_c, cfg.heads),
                    ln_ff: b.layer_norm(&format!("{p}.ln_ff"), cfg.d_c),
                    ff: b.ffn(&format!("{p}.ff"), cfg.d_c, ff, cfg.d_c),
                }
            })
            .collect();
        Self {
            embed,
            proj,
            blocks,
            final_ln: b.layer_norm("caption.final", cfg.d_c),
        }
    }
}

/// Encoder outputs as plain matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStreams {
    pub a: Matrix,
    pub v: Matrix,
    pub c: Option<Matrix>,
}

/// Encoder outputs living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StreamVars {
    pub a: Var,
    pub v: Var,
    pub c: Option<Var>,
}

impl StreamVars {
    pub fn constant<'p>(g: &mut Graph<'p>, s: &'p EncodedStreams) -> Self {
        Self {
            a: g.constant_ref(&s.a),
            v: g.constant_ref(&s.v),
            c: s.c.as_ref().map(|c| g.constant_ref(c)),
        }
    }

    pub fn values(&self, g: &Graph) -> EncodedStreams {
        EncodedStreams {
            a: g.value(self.a).clone(),
            v: g.value(self.v).clone(),
            c: self.c.map(|c| g.value(c).clone()),
        }
    }
}

fn add_positions(g: &mut Graph, x: Var) -> Var {
    let (t, d) = g.value(x).shape();
    let pe = g.constant(sinusoidal_positions(t, d));
    g.add(x, pe)
}

pub fn project_features_on(
    g: &mut Graph,
    net: &Bound,
    layout: &EncoderLayout,
    cfg: &EncoderConfig,
    a0: Var,
    v0: Var,
) -> Result<(Var, Var)> {
    let (wa, wv) = (g.value(a0).cols(), g.value(v0).cols());
    if wa != cfg.input_a || wv != cfg.input_v {
        return Err(Error::Shape(format!(
            "features are {wa}/{wv} wide, encoder expects {}/{}",
            cfg.input_a, cfg.input_v
        )));
    }
    let mut a = net.linear(g, &layout.proj_a, a0);
    let mut v = net.linear(g, &layout.proj_v, v0);
    if cfg.positional {
        a = add_positions(g, a);
        v = add_positions(g, v);
    }
    Ok((a, v))
}

pub fn encoder_block_on(g: &mut Graph, net: &mut Bound, p: &EncoderBlock, a: Var, v: Var) -> Result<(Var, Var)> {
    let na = net.layer_norm(g, &p.ln_self_a, a);
    let (sa, _) = net.mha(g, &p.self_a, na, na, None)?;
    let a_bar = g.add(a, sa);
    let nv = net.layer_norm(g, &p.ln_self_v, v);
    let (sv, _) = net.mha(g, &p.self_v, nv, nv, None)?;
    let v_bar = g.add(v, sv);

    let na = net.layer_norm(g, &p.ln_cross_a, a_bar);
    let nv = net.layer_norm(g, &p.ln_cross_v, v_bar);
    let (xa, _) = net.mha(g, &p.cross_a, na, nv, None)?;
    let (xv, _) = net.mha(g, &p.cross_v, nv, na, None)?;
    let a_tilde = g.add(a_bar, xa);
    let v_tilde = g.add(v_bar, xv);

    let na = net.layer_norm(g, &p.ln_ff_a, a_tilde);
    let fa = net.ffn(g, &p.ff_a, na);
    let nv = net.layer_norm(g, &p.ln_ff_v, v_tilde);
    let fv = net.ffn(g, &p.ff_v, nv);
    Ok((g.add(a_tilde, fa), g.add(v_tilde, fv)))
}

/// Projection, `N` blocks and the optional final normalization.
pub fn encode_on(
    g: &mut Graph,
    net: &mut Bound,
    layout: &EncoderLayout,
    cfg: &EncoderConfig,
    a0: Var,
    v0: Var,
) -> Result<(Var, Var)> {
    let (mut a, mut v) = project_features_on(g, net, layout, cfg, a0, v0)?;
    for block in &layout.blocks {
        (a, v) = encoder_block_on(g, net, block, a, v)?;
    }
    if let (Some(fa), Some(fv)) = (&layout.final_a, &layout.final_v) {
        a = net.layer_norm(g, fa, a);
        v = net.layer_norm(g, fv, v);
    }
    Ok((a, v))
}

pub fn encode_caption_on(
    g: &mut Graph,
    net: &mut Bound,
    layout: &CaptionLayout,
    positional: bool,
    ids: &[usize],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Validation("caption is empty".into()));
    }
    let table = net.var(layout.embed);
    let e = g.gather(table, ids)?;
    let mut x = net.linear(g, &layout.proj, e);
    if positional {
        x = add_positions(g, x);
    }
    for block in &layout.blocks {
        let n = net.layer_norm(g, &block.ln_self, x);
        let (s, _) = net.mha(g, &block.self_att, n, n, None)?;
        x = g.add(x, s);
        let n = net.layer_norm(g, &block.ln_ff, x);
        let f = net.ffn(g, &block.ff, n);
        x = g.add(x, f);
    }
    Ok(net.layer_norm(g, &layout.final_ln, x))
}

/// Plain-matrix multi-head attention with the projections of `layer`.
/// Returns the output and the per-head `T_q×T_k` weights.
pub fn multi_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &ParamSet,
    layer: &Mha,
    mask: Option<&AttentionMask>,
) -> Result<(Matrix, Vec<Matrix>)> {
    if k.rows() != v.rows() || k.cols() != v.cols() {
        return Err(Error::Shape("keys and values must share a shape".into()));
    }
    let mut g = Graph::new();
    let net = Bound::new(&mut g, params, None);
    let (qv, kv, vv) = (g.constant_ref(q), g.constant_ref(k), g.constant_ref(v));
    let qp = net.linear(&mut g, &layer.wq, qv);
    let kp = net.linear(&mut g, &layer.wk, kv);
    let vp = net.linear(&mut g, &layer.wv, vv);
    let att = g.attention(qp, kp, vp, layer.heads, mask)?;
    let out = net.linear(&mut g, &layer.wo, att);
    let weights = g.attention_weights(att).expect("attention node").to_vec();
    Ok((g.value(out).clone(), weights))
}

/// Plain-matrix versions of the encoder operations.
pub struct Encoder<'a> {
    pub cfg: &'a EncoderConfig,
    pub layout: &'a EncoderLayout,
    pub params: &'a ParamSet,
}

impl<'a> Encoder<'a> {
    pub fn project_features(&self, a0: &Matrix, v0: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new();
        let net = Bound::new(&mut g, self.params, None);
        let (a, v) = (g.constant_ref(a0), g.constant_ref(v0));
        let (a, v) = project_features_on(&mut g, &net, self.layout, self.cfg, a, v)?;
        Ok((g.value(a).clone(), g.value(v).clone()))
    }

    pub fn block(&self, n: usize, a: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new();
        let mut net = Bound::new(&mut g, self.params, None);
        let (av, vv) = (g.constant_ref(a), g.constant_ref(v));
        let (a, v) = encoder_block_on(&mut g, &mut net, &self.layout.blocks[n], av, vv)?;
        Ok((g.value(a).clone(), g.value(v).clone()))
    }

    pub fn encode(&self, a0: &Matrix, v0: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new();
        let mut net = Bound::new(&mut g, self.params, None);
        let (a, v) = (g.constant_ref(a0), g.constant_ref(v0));
        let (a, v) = encode_on(&mut g, &mut net, self.layout, self.cfg, a, v)?;
        Ok((g.value(a).clone(), g.value(v).clone()))
    }
}
