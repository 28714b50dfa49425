//! A complete answerer (encoder, optional caption encoder, decoder) with its
//! vocabulary, parameters and on-disk checkpoint format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSet, Vocabulary};
use crate::decoder::{decode_on, DecodeVars, DecoderConfig, DecoderLayout};
use crate::encoder::{encode_caption_on, encode_on, CaptionLayout, EncodedStreams, EncoderConfig, EncoderLayout, StreamVars};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Bound, ParamBuilder, ParamSet};
use crate::tensor::{softmax, Matrix};

pub const CHECKPOINT_FORMAT: &str = "avsd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Dropout rate used while training; zero disables it.
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.use_caption && self.encoder.d_c != self.decoder.d {
            return Err(Error::Config(format!(
                "encoder.d_c ({}) must equal decoder.d ({})",
                self.encoder.d_c, self.decoder.d
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The same architecture with the caption branch switched on or off.
    pub fn with_caption(&self, use_caption: bool) -> Self {
        let mut c = self.clone();
        c.decoder.use_caption = use_caption;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub encoder: EncoderLayout,
    pub caption: Option<CaptionLayout>,
    pub decoder: DecoderLayout,
}

/// Decoder outputs for one context, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    /// `Y⁰ … Yᴹ`, each `T×d`.
    pub layers: Vec<Matrix>,
    /// Next-word distribution after the last context position.
    pub distribution: Vec<f64>,
    /// `[layer][modality][head]` source-attention weights, `T×T_src`.
    /// Modalities are ordered audio, visual, caption.
    pub source_attention: Vec<Vec<Vec<Matrix>>>,
    /// Per-layer `T×branches` fusion weights (attentional fusion only).
    pub fusion_weights: Vec<Option<Matrix>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvsdModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub layout: ModelLayout,
}

fn build_layout(config: &ModelConfig, vocab_size: usize, seed: u64) -> (ParamSet, ModelLayout) {
    let mut b = ParamBuilder::new(seed);
    let (enc, dec) = (&config.encoder, &config.decoder);
    let encoder = EncoderLayout::build(&mut b, enc);
    let caption = dec
        .use_caption
        .then(|| CaptionLayout::build(&mut b, enc, vocab_size, dec.embed_dim, dec.ff));
    let decoder = DecoderLayout::build(&mut b, dec, vocab_size, enc.d_a, enc.d_v, enc.d_c);
    (
        b.finish(),
        ModelLayout {
            encoder,
            caption,
            decoder,
        },
    )
}

impl AvsdModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build_layout(&config, vocab.len(), seed);
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn uses_caption(&self) -> bool {
        self.config.decoder.use_caption
    }

    /// Encode one video (and, for a caption-reading model, its caption) on a tape.
    pub fn encode_on<'p>(
        &self,
        g: &mut Graph<'p>,
        net: &mut Bound,
        features: &'p FeatureSet,
        caption: Option<&[String]>,
    ) -> Result<StreamVars> {
        let a0 = g.constant_ref(&features.audio);
        let v0 = g.constant_ref(&features.visual);
        let (a, v) = encode_on(g, net, &self.layout.encoder, &self.config.encoder, a0, v0)?;
        let c = match &self.layout.caption {
            Some(layout) => {
                let caption = caption.ok_or_else(|| Error::Validation("this model needs a caption".into()))?;
                let ids = self.vocab.encode(caption);
                Some(encode_caption_on(g, net, layout, self.config.decoder.positional, &ids)?)
            }
            None => None,
        };
        Ok(StreamVars { a, v, c })
    }

    pub fn encode(&self, features: &FeatureSet, caption: Option<&[String]>) -> Result<EncodedStreams> {
        let mut g = Graph::new();
        let mut net = Bound::new(&mut g, &self.params, None);
        let vars = self.encode_on(&mut g, &mut net, features, caption)?;
        Ok(vars.values(&g))
    }

    pub fn decode_on(&self, g: &mut Graph, net: &mut Bound, streams: &StreamVars, ids: &[usize]) -> Result<DecodeVars> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(Error::OutOfVocabulary {
                id,
                size: self.vocab.len(),
            });
        }
        decode_on(g, net, &self.layout.decoder, &self.config.decoder, streams, ids)
    }

    /// Logits of the token that follows `ids`.
    pub fn next_logits(&self, ids: &[usize], streams: &EncodedStreams) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut net = Bound::new(&mut g, &self.params, None);
        let s = StreamVars::constant(&mut g, streams);
        let out = self.decode_on(&mut g, &mut net, &s, ids)?;
        let logits = g.value(out.logits);
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    pub fn next_word_distribution(&self, ids: &[usize], streams: &EncodedStreams) -> Result<DecoderState> {
        let mut g = Graph::new();
        let mut net = Bound::new(&mut g, &self.params, None);
        let s = StreamVars::constant(&mut g, streams);
        let out = self.decode_on(&mut g, &mut net, &s, ids)?;
        let logits = g.value(out.logits);
        let distribution = softmax(logits.row(logits.rows() - 1));
        Ok(DecoderState {
            layers: out.layers.iter().map(|&v| g.value(v).clone()).collect(),
            distribution,
            source_attention: out
                .blocks
                .iter()
                .map(|b| {
                    b.source_attention
                        .iter()
                        .map(|&a| g.attention_weights(a).expect("attention node").to_vec())
                        .collect()
                })
                .collect(),
            fusion_weights: out
                .blocks
                .iter()
                .map(|b| b.fusion.and_then(|f| g.fusion_weights(f).cloned()))
                .collect(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocabulary: self.vocab.clone(),
            params: (0..self.params.len())
                .map(|i| {
                    let m = self.params.get(i);
                    NamedMatrix {
                        name: self.params.name(i).to_string(),
                        rows: m.rows(),
                        cols: m.cols(),
                        data: m.as_slice().to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut model = AvsdModel::new(ck.config, ck.vocabulary, 0)?;
        let mut entries = Vec::with_capacity(ck.params.len());
        for p in ck.params {
            if p.data.len() != p.rows * p.cols {
                return Err(Error::Checkpoint(format!("parameter `{}` has a bad length", p.name)));
            }
            entries.push((p.name, Matrix::from_vec(p.rows, p.cols, p.data)));
        }
        model.params.load_named(entries)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_checkpoint(ck)
    }
}

/// Parameter checkpoint: hierarchical names mapped to row-major matrices, with
/// the model config and vocabulary embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub params: Vec<NamedMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Pretty JSON with a trailing newline; parent directories are created.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
