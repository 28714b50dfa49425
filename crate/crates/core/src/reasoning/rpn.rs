//! Time-domain region proposal network over encoder outputs.
//!
//! For every modality and kernel size `k`, the pooled question/answer vector
//! is appended to every frame, `depth` same-padded convolutions of width `k`
//! (ReLU after each) run over time, and a pointwise head emits
//! `(δc, δl, logit)` per frame. The anchor at frame `t` is decoded as
//!
//! ```text
//! center = (t + σ(δc) − 0.5) · period
//! length = k · exp(δl) · period
//! confidence = σ(logit)
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TimeRegion;
use crate::encoder::EncodedStreams;
use crate::error::{Error, Result};
use crate::graph::{bce_logit, sigmoid, smooth_l1, Graph, Var};
use crate::metrics::iou_interval;
use crate::model::{write_json, NamedMatrix};
use crate::nn::{Bound, Linear, ParamBuilder, ParamSet};
use crate::tensor::Matrix;
use crate::training::Adam;

pub const RPN_FORMAT: &str = "avsd-rpn";
pub const RPN_VERSION: u32 = 1;
const TARGET_CLAMP: f64 = 1e-3;

fn default_kernels() -> Vec<usize> {
    vec![1, 3, 5, 7, 9, 11, 15, 21, 31, 41]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasoningConfig {
    /// Width multiplier of the attention-moment region.
    pub nu: f64,
    /// Minimum proposal confidence; anything above 1 keeps nothing.
    pub confidence_threshold: f64,
    #[serde(default = "default_kernels")]
    pub kernel_sizes: Vec<usize>,
    pub rpn_width: usize,
    pub rpn_depth: usize,
    #[serde(default = "default_nms")]
    pub nms_iou: f64,
    #[serde(default = "default_pos")]
    pub positive_iou: f64,
    #[serde(default = "default_neg")]
    pub negative_iou: f64,
    #[serde(default = "default_epochs")]
    pub rpn_epochs: usize,
    #[serde(default = "default_lr")]
    pub rpn_learning_rate: f64,
    #[serde(default = "default_batch")]
    pub rpn_batch_size: usize,
}

fn default_nms() -> f64 {
    0.5
}
fn default_pos() -> f64 {
    0.7
}
fn default_neg() -> f64 {
    0.3
}
fn default_epochs() -> usize {
    60
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            nu: 1.0,
            confidence_threshold: 0.5,
            kernel_sizes: default_kernels(),
            rpn_width: 32,
            rpn_depth: 3,
            nms_iou: default_nms(),
            positive_iou: default_pos(),
            negative_iou: default_neg(),
            rpn_epochs: default_epochs(),
            rpn_learning_rate: default_lr(),
            rpn_batch_size: default_batch(),
        }
    }
}

impl ReasoningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0) {
            return Err(Error::Config("reasoning.nu must be non-negative".into()));
        }
        if !(self.confidence_threshold >= 0.0) {
            return Err(Error::Config("reasoning.confidence_threshold must be non-negative".into()));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config("reasoning.kernel_sizes must be odd and positive".into()));
        }
        if self.rpn_width == 0 || self.rpn_depth == 0 || self.rpn_batch_size == 0 {
            return Err(Error::Config("reasoning.rpn_width, rpn_depth and rpn_batch_size must be positive".into()));
        }
        if !(0.0 <= self.negative_iou && self.negative_iou <= self.positive_iou && self.positive_iou <= 1.0) {
            return Err(Error::Config("need 0 <= negative_iou <= positive_iou <= 1".into()));
        }
        if !(self.rpn_learning_rate > 0.0) {
            return Err(Error::Config("reasoning.rpn_learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpnDims {
    pub d_a: usize,
    pub d_v: usize,
    pub d_qa: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnBranch {
    /// 0 = audio, 1 = visual.
    pub modality: usize,
    pub kernel: usize,
    pub convs: Vec<Linear>,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnModel {
    pub config: ReasoningConfig,
    pub dims: RpnDims,
    pub params: ParamSet,
    pub branches: Vec<RpnBranch>,
}

/// One decoded anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposal {
    /// Clamped to the video, with the confidence attached.
    pub region: TimeRegion,
    pub modality: usize,
    pub kernel: usize,
    pub frame: usize,
    pub period: f64,
    pub delta_c: f64,
    pub delta_l: f64,
    pub logit: f64,
}

impl RegionProposal {
    pub fn confidence(&self) -> f64 {
        sigmoid(self.logit)
    }
}

/// Unclamped `(center, length)` of an anchor given raw head outputs.
pub fn decode_anchor(frame: usize, kernel: usize, period: f64, delta_c: f64, delta_l: f64) -> (f64, f64) {
    let center = (frame as f64 + sigmoid(delta_c) - 0.5) * period;
    let length = kernel as f64 * delta_l.exp() * period;
    (center, length)
}

/// Inverse of [`decode_anchor`]; the center offset is clamped so that the
/// logit stays finite.
pub fn encode_target(frame: usize, kernel: usize, period: f64, center: f64, length: f64) -> (f64, f64) {
    let u = (center / period - frame as f64 + 0.5).clamp(TARGET_CLAMP, 1.0 - TARGET_CLAMP);
    let delta_c = (u / (1.0 - u)).ln();
    let delta_l = (length.max(1e-9) / (kernel as f64 * period)).ln();
    (delta_c, delta_l)
}

fn clamped(center: f64, length: f64, duration: f64) -> (f64, f64) {
    let start = (center - 0.5 * length).clamp(0.0, duration);
    let end = (center + 0.5 * length).clamp(start, duration);
    (start, end)
}

/// The un-regressed anchor box of frame `t`, clamped to the video.
pub fn anchor_region(frame: usize, kernel: usize, period: f64, duration: f64) -> TimeRegion {
    let (c, l) = decode_anchor(frame, kernel, period, 0.0, 0.0);
    let (s, e) = clamped(c, l, duration);
    TimeRegion::new(s, e)
}

/// Keep proposals with confidence ≥ `threshold`, then greedy non-maximum
/// suppression (highest confidence first) at interval IoU `nms_iou`.
pub fn filter_proposals(proposals: &[RegionProposal], threshold: f64, nms_iou: f64) -> Vec<TimeRegion> {
    let mut kept: Vec<&RegionProposal> = proposals.iter().filter(|p| p.confidence() >= threshold).collect();
    kept.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
    let mut out: Vec<TimeRegion> = Vec::new();
    for p in kept {
        if out.iter().all(|r| iou_interval(r, &p.region) < nms_iou) {
            out.push(p.region);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    Positive { delta_c: f64, delta_l: f64 },
    Negative,
    Ignore,
}

/// Label an anchor against ground truth: IoU ≥ `pos` is positive (regressing
/// toward the best-matching region), below `neg` negative, otherwise ignored.
pub fn label_anchor(
    frame: usize,
    kernel: usize,
    period: f64,
    duration: f64,
    gt: &[TimeRegion],
    pos: f64,
    neg: f64,
) -> AnchorLabel {
    let anchor = anchor_region(frame, kernel, period, duration);
    let best = gt
        .iter()
        .map(|g| (iou_interval(&anchor, g), g))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((iou, g)) if iou >= pos => {
            let (delta_c, delta_l) = encode_target(frame, kernel, period, g.center(), g.length());
            AnchorLabel::Positive { delta_c, delta_l }
        }
        Some((iou, _)) if iou >= neg => AnchorLabel::Ignore,
        _ => AnchorLabel::Negative,
    }
}

/// Loss and label counts for one set of anchors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RpnLoss {
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Reference loss from raw head outputs: class-balanced binary cross entropy
/// (mean over positives plus mean over negatives) plus smooth-L1 regression
/// averaged over positives.
pub fn rpn_train_step(
    proposals: &[RegionProposal],
    gt: &[TimeRegion],
    cfg: &ReasoningConfig,
    duration: f64,
) -> RpnLoss {
    let (mut pos_bce, mut neg_bce, mut reg) = (0.0, 0.0, 0.0);
    let (mut np, mut nn) = (0, 0);
    for p in proposals {
        match label_anchor(p.frame, p.kernel, p.period, duration, gt, cfg.positive_iou, cfg.negative_iou) {
            AnchorLabel::Positive { delta_c, delta_l } => {
                np += 1;
                pos_bce += bce_logit(p.logit, 1.0);
                reg += smooth_l1(p.delta_c - delta_c) + smooth_l1(p.delta_l - delta_l);
            }
            AnchorLabel::Negative => {
                nn += 1;
                neg_bce += bce_logit(p.logit, 0.0);
            }
            AnchorLabel::Ignore => {}
        }
    }
    let mut loss = 0.0;
    if np > 0 {
        loss += (pos_bce + reg) / np as f64;
    }
    if nn > 0 {
        loss += neg_bce / nn as f64;
    }
    RpnLoss {
        loss,
        positives: np,
        negatives: nn,
    }
}

/// Per-branch tape outputs.
pub struct BranchVars {
    pub branch: usize,
    /// `T×3` head output: δc, δl, logit.
    pub head: Var,
}

impl RpnModel {
    pub fn new(config: ReasoningConfig, dims: RpnDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(seed);
        let mut branches = Vec::new();
        for (modality, (name, d)) in [("audio", dims.d_a), ("visual", dims.d_v)].into_iter().enumerate() {
            for &k in &config.kernel_sizes {
                let p = format!("rpn.{name}.k{k}");
                let mut width = d + dims.d_qa;
                let convs = (0..config.rpn_depth)
                    .map(|l| {
                        let conv = b.linear(&format!("{p}.conv{l}"), k * width, config.rpn_width, true);
                        width = config.rpn_width;
                        conv
                    })
                    .collect();
                let head = b.linear(&format!("{p}.head"), config.rpn_width, 3, true);
                branches.push(RpnBranch {
                    modality,
                    kernel: k,
                    convs,
                    head,
                });
            }
        }
        Ok(Self {
            config,
            dims,
            params: b.finish(),
            branches,
        })
    }

    /// Head outputs of every branch whose kernel fits the sequence.
    pub fn forward_on(&self, g: &mut Graph, net: &Bound, a: Var, v: Var, qa: Var) -> Result<Vec<BranchVars>> {
        if g.value(qa).shape() != (1, self.dims.d_qa) {
            return Err(Error::Shape(format!("qa vector must be 1x{}", self.dims.d_qa)));
        }
        let streams = [a, v];
        let mut out = Vec::new();
        for (i, br) in self.branches.iter().enumerate() {
            let x = streams[br.modality];
            let t = g.value(x).rows();
            if t < br.kernel {
                continue;
            }
            let q = g.broadcast_rows(qa, t);
            let mut h = g.concat_cols(&[x, q]);
            for conv in &br.convs {
                let cols = g.im2col(h, br.kernel);
                let y = net.linear(g, conv, cols);
                h = g.relu(y);
            }
            out.push(BranchVars {
                branch: i,
                head: net.linear(g, &br.head, h),
            });
        }
        Ok(out)
    }

    fn check_streams(&self, streams: &EncodedStreams) -> Result<()> {
        if streams.a.cols() != self.dims.d_a || streams.v.cols() != self.dims.d_v {
            return Err(Error::Shape(format!(
                "streams are {}/{} wide, proposal network expects {}/{}",
                streams.a.cols(),
                streams.v.cols(),
                self.dims.d_a,
                self.dims.d_v
            )));
        }
        Ok(())
    }

    fn decode(&self, g: &Graph, heads: &[BranchVars], periods: [f64; 2], duration: f64) -> Vec<RegionProposal> {
        let mut out = Vec::new();
        for bv in heads {
            let br = &self.branches[bv.branch];
            let h = g.value(bv.head);
            let period = periods[br.modality];
            for t in 0..h.rows() {
                let (dc, dl, logit) = (h.get(t, 0), h.get(t, 1), h.get(t, 2));
                let (c, l) = decode_anchor(t, br.kernel, period, dc, dl);
                let (s, e) = clamped(c, l, duration);
                out.push(RegionProposal {
                    region: TimeRegion::with_confidence(s, e, sigmoid(logit)),
                    modality: br.modality,
                    kernel: br.kernel,
                    frame: t,
                    period,
                    delta_c: dc,
                    delta_l: dl,
                    logit,
                });
            }
        }
        out
    }

    /// All anchors of all valid branches, decoded.
    pub fn propose(
        &self,
        streams: &EncodedStreams,
        qa: &[f64],
        periods: [f64; 2],
        duration: f64,
    ) -> Result<Vec<RegionProposal>> {
        self.check_streams(streams)?;
        let mut g = Graph::new();
        let net = Bound::new(&mut g, &self.params, None);
        let a = g.constant_ref(&streams.a);
        let v = g.constant_ref(&streams.v);
        let q = g.constant(Matrix::from_vec(1, qa.len(), qa.to_vec()));
        let heads = self.forward_on(&mut g, &net, a, v, q)?;
        Ok(self.decode(&g, &heads, periods, duration))
    }

    /// Put the training loss of one example on a tape.
    pub fn loss_on(
        &self,
        g: &mut Graph,
        net: &Bound,
        example: &RpnExample,
        a: Var,
        v: Var,
        qa: Var,
    ) -> Result<(Option<Var>, RpnLoss)> {
        let heads = self.forward_on(g, net, a, v, qa)?;
        let periods = example.periods;
        let mut stats = RpnLoss::default();
        let mut labelled: Vec<(Var, Vec<AnchorLabel>)> = Vec::new();
        for bv in &heads {
            let br = &self.branches[bv.branch];
            let t = g.value(bv.head).rows();
            let labels: Vec<AnchorLabel> = (0..t)
                .map(|f| {
                    label_anchor(
                        f,
                        br.kernel,
                        periods[br.modality],
                        example.duration,
                        &example.gt,
                        self.config.positive_iou,
                        self.config.negative_iou,
                    )
                })
                .collect();
            for l in &labels {
                match *l {
                    AnchorLabel::Positive { .. } => {
                        stats.positives += 1;
                    }
                    AnchorLabel::Negative => stats.negatives += 1,
                    AnchorLabel::Ignore => {}
                }
            }
            labelled.push((bv.head, labels));
        }
        let mut parts = Vec::new();
        for (head, labels) in labelled {
            let t = labels.len();
            let logits = g.slice_cols(head, 2, 1);
            let mut targets = Matrix::zeros(t, 1);
            let mut weights = Matrix::zeros(t, 1);
            let mut any = false;
            for (f, l) in labels.iter().enumerate() {
                match l {
                    AnchorLabel::Positive { .. } => {
                        targets.set(f, 0, 1.0);
                        weights.set(f, 0, 1.0 / stats.positives as f64);
                        any = true;
                    }
                    AnchorLabel::Negative => {
                        weights.set(f, 0, 1.0 / stats.negatives as f64);
                        any = true;
                    }
                    AnchorLabel::Ignore => {}
                }
            }
            if any {
                parts.push(g.bce_with_logits(logits, targets, weights));
            }
            if labels.iter().any(|l| matches!(l, AnchorLabel::Positive { .. })) {
                let deltas = g.slice_cols(head, 0, 2);
                let mut targets = Matrix::zeros(t, 2);
                let mut weights = Matrix::zeros(t, 2);
                for (f, l) in labels.iter().enumerate() {
                    if let AnchorLabel::Positive { delta_c, delta_l } = *l {
                        targets.set(f, 0, delta_c);
                        targets.set(f, 1, delta_l);
                        weights.set(f, 0, 1.0 / stats.positives as f64);
                        weights.set(f, 1, 1.0 / stats.positives as f64);
                    }
                }
                parts.push(g.smooth_l1(deltas, targets, weights));
            }
        }
        if parts.is_empty() {
            return Ok((None, stats));
        }
        let root = g.sum(&parts);
        stats.loss = g.value(root).get(0, 0);
        Ok((Some(root), stats))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = RpnCheckpoint {
            format: RPN_FORMAT.to_string(),
            version: RPN_VERSION,
            config: self.config.clone(),
            dims: self.dims,
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
        };
        write_json(path, &ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: RpnCheckpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.format != RPN_FORMAT || ck.version != RPN_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let mut model = RpnModel::new(ck.config, ck.dims, 0)?;
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
}

#[derive(Serialize, Deserialize)]
struct RpnCheckpoint {
    format: String,
    version: u32,
    config: ReasoningConfig,
    dims: RpnDims,
    params: Vec<NamedMatrix>,
}

/// A precomputed training example: frozen encoder streams, the pooled QA
/// vector and the ground-truth regions.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnExample {
    pub streams: EncodedStreams,
    pub qa: Matrix,
    pub gt: Vec<TimeRegion>,
    pub periods: [f64; 2],
    pub duration: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RpnEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Examples with no positive anchor (confidence loss only).
    pub without_positives: usize,
}

const RPN_TAG: u32 = 7;

/// Mean loss and gradients of the examples in `batch`.
pub fn rpn_batch_gradients(rpn: &RpnModel, examples: &[&RpnExample]) -> Result<(RpnLoss, usize, Vec<Matrix>)> {
    let mut g = Graph::new();
    let net = Bound::new(&mut g, &rpn.params, Some(RPN_TAG));
    let mut roots = Vec::new();
    let mut total = RpnLoss::default();
    let mut without = 0;
    for ex in examples {
        let a = g.constant_ref(&ex.streams.a);
        let v = g.constant_ref(&ex.streams.v);
        let q = g.constant_ref(&ex.qa);
        let (root, stats) = rpn.loss_on(&mut g, &net, ex, a, v, q)?;
        if stats.positives == 0 {
            without += 1;
        }
        total.loss += stats.loss;
        total.positives += stats.positives;
        total.negatives += stats.negatives;
        roots.extend(root);
    }
    let shapes = rpn.params.shapes();
    if roots.is_empty() {
        return Ok((total, without, shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect()));
    }
    let sum = g.sum(&roots);
    let mean = g.scale(sum, 1.0 / examples.len() as f64);
    total.loss /= examples.len() as f64;
    let grads = g.backward(mean);
    Ok((total, without, grads.for_tag(RPN_TAG, &shapes)))
}

/// Adam training of the proposal network on fixed examples.
pub fn train_rpn(rpn: &mut RpnModel, examples: &[RpnExample], seed: u64) -> Result<Vec<RpnEpoch>> {
    if examples.is_empty() {
        return Err(Error::Validation("no examples with ground-truth regions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(&rpn.params, rpn.config.rpn_learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    for epoch in 1..=rpn.config.rpn_epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut without, mut batches) = (0.0, 0, 0);
        for chunk in order.chunks(rpn.config.rpn_batch_size) {
            let batch: Vec<&RpnExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (stats, w, grads) = rpn_batch_gradients(rpn, &batch)?;
            if !stats.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batches });
            }
            loss += stats.loss;
            without += w;
            batches += 1;
            opt.step(&mut rpn.params, &grads);
        }
        log.push(RpnEpoch {
            epoch,
            loss: loss / batches as f64,
            without_positives: without,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::check_gradients;
    use rand::Rng;

    fn small_config() -> ReasoningConfig {
        ReasoningConfig {
            kernel_sizes: vec![1, 3, 5],
            rpn_width: 4,
            rpn_depth: 2,
            ..Default::default()
        }
    }

    fn example(seed: u64) -> RpnExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        RpnExample {
            streams: EncodedStreams {
                a: m(8, 3),
                v: m(6, 2),
                c: None,
            },
            qa: m(1, 2),
            gt: vec![TimeRegion::new(1.0, 2.6), TimeRegion::new(0.2, 0.9)],
            periods: [0.5, 0.5],
            duration: 4.0,
        }
    }

    fn dims() -> RpnDims {
        RpnDims { d_a: 3, d_v: 2, d_qa: 2 }
    }

    #[test]
    fn counts_and_zero_head() {
        let mut rpn = RpnModel::new(small_config(), dims(), 1).unwrap();
        for br in rpn.branches.clone() {
            *rpn.params.get_mut(br.head.w) = Matrix::zeros(4, 3);
        }
        let ex = example(2);
        let props = rpn.propose(&ex.streams, ex.qa.row(0), ex.periods, ex.duration).unwrap();
        assert_eq!(props.len(), 3 * 8 + 3 * 6);
        for p in &props {
            assert_eq!((p.delta_c, p.delta_l, p.confidence()), (0.0, 0.0, 0.5));
            assert!(0.0 <= p.region.start && p.region.start <= p.region.end && p.region.end <= ex.duration);
            assert_eq!(p.region, {
                let a = anchor_region(p.frame, p.kernel, p.period, ex.duration);
                TimeRegion::with_confidence(a.start, a.end, 0.5)
            });
        }
    }

    #[test]
    fn short_streams_skip_wide_kernels() {
        let rpn = RpnModel::new(small_config(), dims(), 1).unwrap();
        let mut ex = example(3);
        ex.streams.v = Matrix::zeros(2, 2);
        let props = rpn.propose(&ex.streams, ex.qa.row(0), ex.periods, ex.duration).unwrap();
        assert_eq!(props.len(), 3 * 8 + 2);
    }

    #[test]
    fn decode_inversion_round_trips() {
        let rpn = RpnModel::new(small_config(), dims(), 4).unwrap();
        let ex = example(5);
        for p in rpn.propose(&ex.streams, ex.qa.row(0), ex.periods, 100.0).unwrap() {
            let (c, l) = decode_anchor(p.frame, p.kernel, p.period, p.delta_c, p.delta_l);
            let (dc, dl) = encode_target(p.frame, p.kernel, p.period, c, l);
            assert!((dc - p.delta_c).abs() < 1e-10 && (dl - p.delta_l).abs() < 1e-10);
        }
        assert_eq!(encode_target(4, 3, 0.5, 2.0, 1.5), (0.0, 0.0));
    }

    #[test]
    fn labels_follow_the_iou_bands() {
        let gt = [TimeRegion::new(1.75, 3.25)];
        // Anchor at frame 5, kernel 3, period 0.5 is exactly [1.75, 3.25].
        assert_eq!(
            label_anchor(5, 3, 0.5, 10.0, &gt, 0.7, 0.3),
            AnchorLabel::Positive { delta_c: 0.0, delta_l: 0.0 }
        );
        // Kernel 1 at frame 5 is [2.25, 2.75]: IoU 1/3, ignored.
        assert_eq!(label_anchor(5, 1, 0.5, 10.0, &gt, 0.7, 0.3), AnchorLabel::Ignore);
        assert_eq!(label_anchor(15, 1, 0.5, 10.0, &gt, 0.7, 0.3), AnchorLabel::Negative);
    }

    fn proposal(s: f64, e: f64, conf: f64) -> RegionProposal {
        let logit = (conf / (1.0 - conf)).ln();
        RegionProposal {
            region: TimeRegion::with_confidence(s, e, conf),
            modality: 0,
            kernel: 1,
            frame: 0,
            period: 1.0,
            delta_c: 0.0,
            delta_l: 0.0,
            logit,
        }
    }

    #[test]
    fn filtering() {
        let kept = filter_proposals(&[proposal(0.0, 1.0, 0.4), proposal(2.0, 3.0, 0.6)], 0.5, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].start, 2.0);
        let kept = filter_proposals(&[proposal(0.0, 1.0, 0.8), proposal(0.0, 1.0, 0.9)], 0.5, 0.5);
        assert_eq!(kept.len(), 1);
        assert!((kept[0].confidence.unwrap() - 0.9).abs() < 1e-12);
        assert!(filter_proposals(&[], 0.5, 0.5).is_empty());
        assert!(filter_proposals(&[proposal(0.0, 1.0, 0.99)], 1.01, 0.5).is_empty());
    }

    #[test]
    fn tape_loss_matches_reference_loss() {
        let rpn = RpnModel::new(small_config(), dims(), 6).unwrap();
        let ex = example(7);
        let props = rpn.propose(&ex.streams, ex.qa.row(0), ex.periods, ex.duration).unwrap();
        let reference = rpn_train_step(&props, &ex.gt, &rpn.config, ex.duration);
        let (tape, _, _) = rpn_batch_gradients(&rpn, &[&ex]).unwrap();
        assert!(reference.positives > 0 && reference.negatives > 0);
        assert_eq!((tape.positives, tape.negatives), (reference.positives, reference.negatives));
        assert!((tape.loss - reference.loss).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let rpn = RpnModel::new(small_config(), dims(), 8).unwrap();
        let ex = example(9);
        let (_, _, grads) = rpn_batch_gradients(&rpn, &[&ex]).unwrap();
        let mut loss = |sets: &[ParamSet]| -> Result<f64> {
            let mut probe = rpn.clone();
            probe.params = sets[0].clone();
            let props = probe.propose(&ex.streams, ex.qa.row(0), ex.periods, ex.duration)?;
            Ok(rpn_train_step(&props, &ex.gt, &probe.config, ex.duration).loss)
        };
        let report = check_gradients(&mut [rpn.params.clone()], &[""], &[grads], 1e-6, &mut loss).unwrap();
        let worst = report.worst().unwrap();
        assert!(worst.max_rel_error < 1e-3, "{worst:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let rpn = RpnModel::new(small_config(), dims(), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rpn.json");
        rpn.save(&path).unwrap();
        assert_eq!(RpnModel::load(&path).unwrap(), rpn);
    }
}
