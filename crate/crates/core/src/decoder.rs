//! Autoregressive decoder: causal self-attention, per-modality source
//! attention and a fusion stage feeding the feed-forward layer.
//!
//! ```text
//! Ȳ   = Y + MHA_causal(LN(Y))
//! Ȳˣ  = Ȳ + MHA(LN(Ȳ), X)            for X in audio, visual [, caption]
//! concat:       Y' = mean(Ȳˣ) + FFN(LN([Ȳᴬ; Ȳⱽ; …]))
//! attentional:  F  = Σₓ αₓ Ȳˣ,  α = softmax(LN(Ȳ)W_q · Ȳˣ W_k / √d)
//!               Y' = F + FFN(LN(F))
//! ```
//!
//! The fusion keys are bias-free projections of the branch outputs (a shared
//! key offset would cancel in the softmax) and the values are the branch
//! outputs themselves, so equal branches fuse to that same vector.

use serde::{Deserialize, Serialize};

use crate::encoder::StreamVars;
use crate::error::{Error, Result};
use crate::graph::{AttentionMask, Graph, Var};
use crate::nn::{Bound, Ffn, LayerNorm, Linear, Mha, ParamBuilder};
use crate::tensor::sinusoidal_positions;

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Concat,
    Attentional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Decoder block count.
    pub blocks: usize,
    pub d: usize,
    pub ff: usize,
    pub heads: usize,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub use_caption: bool,
    pub embed_dim: usize,
    #[serde(default = "yes")]
    pub positional: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            d: 16,
            ff: 32,
            heads: 4,
            fusion: FusionMode::Concat,
            use_caption: false,
            embed_dim: 16,
            positional: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d", self.d),
            ("ff", self.ff),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("decoder.{name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        if self.use_caption {
            3
        } else {
            2
        }
    }

    /// Layer whose states the state-similarity loss compares.
    pub fn middle_layer(&self) -> usize {
        self.blocks / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionLayout {
    Concat {
        ln: LayerNorm,
        ffn: Ffn,
    },
    Attentional {
        ln_q: LayerNorm,
        wq: Linear,
        wk: Linear,
        ln_ff: LayerNorm,
        ffn: Ffn,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_att: Mha,
    pub ln_src: LayerNorm,
    pub src_a: Mha,
    pub src_v: Mha,
    pub src_c: Option<Mha>,
    pub fusion: FusionLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayout {
    pub embed: usize,
    pub embed_proj: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub final_ln: LayerNorm,
    pub out: Linear,
}

impl DecoderLayout {
    /// `d_a`, `d_v`, `d_c`: widths of the encoded streams the decoder attends to.
    pub fn build(b: &mut ParamBuilder, cfg: &DecoderConfig, vocab: usize, d_a: usize, d_v: usize, d_c: usize) -> Self {
        let d = cfg.d;
        let embed = b.embedding("decoder.embed", vocab, cfg.embed_dim);
        let embed_proj = b.linear("decoder.embed_proj", cfg.embed_dim, d, true);
        let n = cfg.branches();
        let blocks = (0..cfg.blocks)
            .map(|m| {
                let p = format!("decoder.blocks.{m}");
                let fusion = match cfg.fusion {
                    FusionMode::Concat => FusionLayout::Concat {
                        ln: b.layer_norm(&format!("{p}.fusion.ln"), n * d),
                        ffn: b.ffn(&format!("{p}.fusion.ff"), n * d, cfg.ff, d),
                    },
                    FusionMode::Attentional => FusionLayout::Attentional {
                        ln_q: b.layer_norm(&format!("{p}.fusion.ln_query"), d),
                        wq: b.linear(&format!("{p}.fusion.wq"), d, d, true),
                        wk: b.linear(&format!("{p}.fusion.wk"), d, d, false),
                        ln_ff: b.layer_norm(&format!("{p}.fusion.ln_ff"), d),
                        ffn: b.ffn(&format!("{p}.fusion.ff"), d, cfg.ff, d),
                    },
                };
                DecoderBlock {
                    ln_self: b.layer_norm(&format!("{p}.ln_self"), d),
                    self_att: b.mha(&format!("{p}.self_attn"), d, d, d, cfg.heads),
                    ln_src: b.layer_norm(&format!("{p}.ln_source"), d),
                    src_a: b.mha(&format!("{p}.source_attn_audio"), d, d_a, d, cfg.heads),
                    src_v: b.mha(&format!("{p}.source_attn_visual"), d, d_v, d, cfg.heads),
                    src_c: cfg
                        .use_caption
                        .then(|| b.mha(&format!("{p}.source_attn_caption"), d, d_c, d, cfg.heads)),
                    fusion,
                }
            })
            .collect();
        Self {
            embed,
            embed_proj,
            blocks,
            final_ln: b.layer_norm("decoder.final", d),
            out: b.linear("decoder.out", d, vocab, true),
        }
    }
}

/// Tape nodes of one decoder block.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub output: Var,
    /// Raw attention nodes for audio, visual and (teacher) caption.
    pub source_attention: Vec<Var>,
    pub fusion: Option<Var>,
}

/// Tape nodes of a full decoder pass.
#[derive(Clone, Debug)]
pub struct DecodeVars {
    /// `Y⁰ … Yᴹ`.
    pub layers: Vec<Var>,
    pub blocks: Vec<BlockVars>,
    /// `T×|𝒱|` next-word logits for every position.
    pub logits: Var,
}

pub fn embed_tokens_on(g: &mut Graph, net: &Bound, layout: &DecoderLayout, cfg: &DecoderConfig, ids: &[usize]) -> Result<Var> {
    let table = net.var(layout.embed);
    let e = g.gather(table, ids)?;
    let x = net.linear(g, &layout.embed_proj, e);
    if !cfg.positional {
        return Ok(x);
    }
    let pe = g.constant(sinusoidal_positions(ids.len(), cfg.d));
    Ok(g.add(x, pe))
}

pub fn decoder_block_on(
    g: &mut Graph,
    net: &mut Bound,
    p: &DecoderBlock,
    y: Var,
    streams: &StreamVars,
) -> Result<BlockVars> {
    let n = net.layer_norm(g, &p.ln_self, y);
    let (s, _) = net.mha(g, &p.self_att, n, n, Some(&AttentionMask::Causal))?;
    let y_bar = g.add(y, s);
    let n = net.layer_norm(g, &p.ln_src, y_bar);

    let mut sources = vec![(&p.src_a, streams.a), (&p.src_v, streams.v)];
    match (&p.src_c, streams.c) {
        (Some(src_c), Some(c)) => sources.push((src_c, c)),
        (Some(_), None) => {
            return Err(Error::Validation("caption branch enabled but no caption encoding supplied".into()))
        }
        _ => {}
    }
    let mut branches = Vec::with_capacity(sources.len());
    let mut source_attention = Vec::with_capacity(sources.len());
    for (mha, src) in sources {
        let (o, att) = net.mha(g, mha, n, src, None)?;
        branches.push(g.add(y_bar, o));
        source_attention.push(att);
    }

    let (output, fusion) = match &p.fusion {
        FusionLayout::Concat { ln, ffn } => {
            let sum = g.sum(&branches);
            let mean = g.scale(sum, 1.0 / branches.len() as f64);
            let cat = g.concat_cols(&branches);
            let nc = net.layer_norm(g, ln, cat);
            let f = net.ffn(g, ffn, nc);
            (g.add(mean, f), None)
        }
        FusionLayout::Attentional {
            ln_q,
            wq,
            wk,
            ln_ff,
            ffn,
        } => {
            let nq = net.layer_norm(g, ln_q, y_bar);
            let q = net.linear(g, wq, nq);
            let keys: Vec<Var> = branches
                .iter()
                .map(|&b| net.linear(g, wk, b))
                .collect();
            let fused = g.fusion(q, &keys, &branches)?;
            let nf = net.layer_norm(g, ln_ff, fused);
            let f = net.ffn(g, ffn, nf);
            (g.add(fused, f), Some(fused))
        }
    };
    Ok(BlockVars {
        output,
        source_attention,
        fusion,
    })
}

pub fn decode_on(
    g: &mut Graph,
    net: &mut Bound,
    layout: &DecoderLayout,
    cfg: &DecoderConfig,
    streams: &StreamVars,
    ids: &[usize],
) -> Result<DecodeVars> {
    if ids.is_empty() {
        return Err(Error::Validation("decoder context is empty".into()));
    }
    let mut y = embed_tokens_on(g, net, layout, cfg, ids)?;
    let mut layers = vec![y];
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for block in &layout.blocks {
        let vars = decoder_block_on(g, net, block, y, streams)?;
        y = vars.output;
        layers.push(y);
        blocks.push(vars);
    }
    let n = net.layer_norm(g, &layout.final_ln, y);
    let logits = net.linear(g, &layout.out, n);
    Ok(DecodeVars { layers, blocks, logits })
}
