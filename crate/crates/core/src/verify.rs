//! Self-checks behind `avsd verify`: finite-difference gradients, naive
//! loop reimplementations of the blocks, exhaustive search, scorer fixtures
//! and frame-set oracles.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::config::RunConfig;
use crate::data::{
    build_vocabulary, Corpus, DialogSample, DialogTurn, FeatureSet, HistoryPolicy, Split, TimeRegion, EOS_ID,
};
use crate::decoder::{decoder_block_on, DecoderConfig, FusionLayout, FusionMode};
use crate::encoder::{encoder_block_on, EncoderConfig, StreamVars};
use crate::error::Result;
use crate::generation::{beam_search, ensemble_next_distribution, greedy_decode, Ensemble, NextWordModel, SearchConfig};
use crate::graph::Graph;
use crate::metrics::{bleu4, cider_d, iou2, iou_interval, rouge_l};
use crate::model::{AvsdModel, ModelConfig};
use crate::nn::{Bound, Ffn, LayerNorm, Linear, Mha, ParamSet};
use crate::tensor::{log_softmax, softmax, Matrix};
use crate::training::{gradient_check, GradCheckReport, Objective, Role};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        out
    }
}

/// Knobs for planting faults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Multiplies every analytic gradient; anything but 1 must fail.
    pub gradient_scale: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { gradient_scale: 1.0 }
    }
}

pub fn run_all(cfg: &RunConfig) -> Result<VerifyReport> {
    run_with(cfg, VerifyOptions::default())
}

pub fn run_with(cfg: &RunConfig, opts: VerifyOptions) -> Result<VerifyReport> {
    let seed = cfg.seed;
    let mut checks = Vec::new();
    let (t, s) = gradient_checks(seed, opts.gradient_scale)?;
    checks.push(gradcheck_verdict("gradient check (teacher)", &t));
    checks.push(gradcheck_verdict("gradient check (student, joint)", &s));
    checks.push(block_oracles(10)?);
    checks.push(beam_oracle(20)?);
    checks.push(ensemble_identities(seed)?);
    checks.push(caption_metric_fixture()?);
    checks.push(iou2_oracle(100, seed));
    checks.push(invariants(seed)?);
    Ok(VerifyReport { checks })
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_STEP: f64 = 1e-5;

pub fn gradcheck_verdict(name: &str, r: &GradCheckReport) -> Check {
    let worst = r.worst().map_or(String::from("-"), |w| w.group.clone());
    Check::new(
        name,
        r.max_rel_error < GRADCHECK_TOLERANCE,
        format!(
            "max relative error {:.2e} over {} scalars (worst group {worst})",
            r.max_rel_error, r.checked
        ),
    )
}

/// A one-dialog corpus whose vocabulary has 11 entries, with 4 audio and 3
/// visual frames.
pub fn gradcheck_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let fs = FeatureSet::new(m(4, 3), 1.0, m(3, 4), 0.75).expect("well-formed features");
    let sample = DialogSample {
        video_id: "grad".into(),
        turns: vec![DialogTurn::from_text("what is it ?", "a red cup")],
        caption: Some(vec!["a".into(), "red".into(), "cup".into()]),
        reasons: None,
    };
    Corpus {
        split: Split::Train,
        samples: vec![sample],
        features: [("grad".to_string(), fs)].into_iter().collect(),
    }
}

/// Two encoder and two decoder blocks at width 8.
pub fn gradcheck_config(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_a: 3,
            input_v: 4,
            blocks: 2,
            d_a: 8,
            d_v: 8,
            ff_a: 12,
            ff_v: 12,
            heads: 2,
            d_c: 8,
            final_norm: true,
            positional: true,
        },
        decoder: DecoderConfig {
            blocks: 2,
            d: 8,
            ff: 12,
            heads: 2,
            fusion,
            use_caption: false,
            embed_dim: 8,
            positional: true,
        },
        dropout: 0.0,
    }
}

/// Central-difference checks of the teacher's cross entropy and of the
/// joint objective (student and teacher parameters together).
pub fn gradient_checks(seed: u64, gradient_scale: f64) -> Result<(GradCheckReport, GradCheckReport)> {
    gradient_checks_for(seed, gradient_scale, FusionMode::Concat)
}

pub fn gradient_checks_for(
    seed: u64,
    gradient_scale: f64,
    fusion: FusionMode,
) -> Result<(GradCheckReport, GradCheckReport)> {
    let corpus = gradcheck_corpus(seed);
    let vocab = build_vocabulary(&corpus, 1);
    let cfg = gradcheck_config(fusion);
    let teacher = perturbed(AvsdModel::new(cfg.with_caption(true), vocab.clone(), seed)?, seed);
    let student = perturbed(AvsdModel::new(cfg.with_caption(false), vocab, seed + 1)?, seed + 1);
    let samples: Vec<&DialogSample> = corpus.samples.iter().collect();
    let teacher_obj = Objective {
        role: Role::Teacher,
        model: &teacher,
        teacher: None,
        lambda_c: 0.0,
        freeze_teacher: true,
        policy: HistoryPolicy::PreviousQuestionOnly,
        dropout_seed: None,
        soft_targets: None,
    };
    let t = gradient_check(&teacher_obj, &corpus, &samples, GRADCHECK_STEP, gradient_scale)?;
    let joint = Objective {
        role: Role::StudentJstl,
        model: &student,
        teacher: Some(&teacher),
        lambda_c: 1.0,
        freeze_teacher: false,
        ..teacher_obj
    };
    let s = gradient_check(&joint, &corpus, &samples, GRADCHECK_STEP, gradient_scale)?;
    Ok((t, s))
}

/// Nudge normalization gains and every bias away from their initial values
/// so that no parameter sits at a special point.
fn perturbed(mut model: AvsdModel, seed: u64) -> AvsdModel {
    randomize(&mut model.params, seed, 0.2);
    model
}

fn randomize(params: &mut ParamSet, seed: u64, spread: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..params.len() {
        let name = params.name(i).to_string();
        if name.ends_with(".gain") || name.ends_with(".bias") || name.ends_with(".b") {
            for v in params.get_mut(i).as_mut_slice() {
                *v += rng.gen_range(-spread..spread);
            }
        }
    }
}

// Naive row-major loops over `Vec<Vec<f64>>`, sharing nothing with the tape.

type Rows = Vec<Vec<f64>>;

fn n_linear(x: &Rows, p: &ParamSet, l: &Linear) -> Rows {
    let w = p.get(l.w);
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let mut s = l.b.map_or(0.0, |b| p.get(b).get(0, j));
                    for (k, xv) in row.iter().enumerate() {
                        s += xv * w.get(k, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn n_layer_norm(x: &Rows, p: &ParamSet, l: &LayerNorm) -> Rows {
    let (g, b) = (p.get(l.gain), p.get(l.bias));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.get(0, j) + b.get(0, j))
                .collect()
        })
        .collect()
}

fn n_add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn n_mha(query: &Rows, source: &Rows, p: &ParamSet, m: &Mha, causal: bool) -> Rows {
    let q = n_linear(query, p, &m.wq);
    let k = n_linear(source, p, &m.wk);
    let v = n_linear(source, p, &m.wv);
    let d = q[0].len();
    let dh = d / m.heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..m.heads {
        for i in 0..q.len() {
            let allowed: Vec<usize> = (0..k.len()).filter(|&j| !causal || j <= i).collect();
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (s, &j) in scores.iter().zip(&allowed) {
                let w = (s - max).exp() / z;
                for c in 0..dh {
                    out[i][h * dh + c] += w * v[j][h * dh + c];
                }
            }
        }
    }
    n_linear(&out, p, &m.wo)
}

fn n_ffn(x: &Rows, p: &ParamSet, f: &Ffn) -> Rows {
    let h: Rows = n_linear(x, p, &f.l1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    n_linear(&h, p, &f.l2)
}

fn max_diff(a: &Rows, b: &Matrix) -> f64 {
    let mut m = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b.get(i, j)).abs());
        }
    }
    m
}

fn random_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Rows {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect()
}

fn to_matrix(r: &Rows) -> Matrix {
    Matrix::from_rows(r)
}

/// Largest gap between the tape encoder block and the naive loops.
pub fn encoder_block_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::default();
    cfg.encoder.d_a = 8;
    cfg.encoder.d_v = 12;
    cfg.encoder.heads = 2;
    cfg.encoder.d_c = 8;
    cfg.decoder.d = 8;
    cfg.decoder.heads = 2;
    let vocab = crate::data::Vocabulary::from_words(["x"]);
    let mut model = AvsdModel::new(cfg, vocab, seed)?;
    randomize(&mut model.params, seed, 0.5);
    let block = &model.layout.encoder.blocks[0];
    let (a, v) = (random_rows(&mut rng, 5, 8), random_rows(&mut rng, 4, 12));
    let p = &model.params;

    let a_bar = n_add(&a, &n_mha(&n_layer_norm(&a, p, &block.ln_self_a), &n_layer_norm(&a, p, &block.ln_self_a), p, &block.self_a, false));
    let v_bar = n_add(&v, &n_mha(&n_layer_norm(&v, p, &block.ln_self_v), &n_layer_norm(&v, p, &block.ln_self_v), p, &block.self_v, false));
    let la = n_layer_norm(&a_bar, p, &block.ln_cross_a);
    let lv = n_layer_norm(&v_bar, p, &block.ln_cross_v);
    let a_t = n_add(&a_bar, &n_mha(&la, &lv, p, &block.cross_a, false));
    let v_t = n_add(&v_bar, &n_mha(&lv, &la, p, &block.cross_v, false));
    let a_out = n_add(&a_t, &n_ffn(&n_layer_norm(&a_t, p, &block.ln_ff_a), p, &block.ff_a));
    let v_out = n_add(&v_t, &n_ffn(&n_layer_norm(&v_t, p, &block.ln_ff_v), p, &block.ff_v));

    let (am, vm) = (to_matrix(&a), to_matrix(&v));
    let mut g = Graph::new();
    let mut net = Bound::new(&mut g, p, None);
    let (ai, vi) = (g.constant_ref(&am), g.constant_ref(&vm));
    let (ao, vo) = encoder_block_on(&mut g, &mut net, block, ai, vi)?;
    Ok(max_diff(&a_out, g.value(ao)).max(max_diff(&v_out, g.value(vo))))
}

/// Largest gap between the tape decoder block and the naive loops.
pub fn decoder_block_gap(seed: u64, fusion: FusionMode, use_caption: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::default();
    cfg.encoder.d_a = 8;
    cfg.encoder.d_v = 12;
    cfg.encoder.d_c = 8;
    cfg.encoder.heads = 2;
    cfg.decoder.d = 8;
    cfg.decoder.heads = 2;
    cfg.decoder.fusion = fusion;
    cfg.decoder.use_caption = use_caption;
    let vocab = crate::data::Vocabulary::from_words(["x"]);
    let mut model = AvsdModel::new(cfg, vocab, seed)?;
    randomize(&mut model.params, seed, 0.5);
    let block = &model.layout.decoder.blocks[0];
    let p = &model.params;
    let y = random_rows(&mut rng, 3, 8);
    let a = random_rows(&mut rng, 5, 8);
    let v = random_rows(&mut rng, 4, 12);
    let c = random_rows(&mut rng, 6, 8);

    let ln = n_layer_norm(&y, p, &block.ln_self);
    let y_bar = n_add(&y, &n_mha(&ln, &ln, p, &block.self_att, true));
    let q = n_layer_norm(&y_bar, p, &block.ln_src);
    let mut branches = vec![
        n_add(&y_bar, &n_mha(&q, &a, p, &block.src_a, false)),
        n_add(&y_bar, &n_mha(&q, &v, p, &block.src_v, false)),
    ];
    if let Some(src_c) = &block.src_c {
        branches.push(n_add(&y_bar, &n_mha(&q, &c, p, src_c, false)));
    }
    let k = branches.len() as f64;
    let out: Rows = match &block.fusion {
        FusionLayout::Concat { ln, ffn } => {
            let cat: Rows = (0..y.len()).map(|i| branches.iter().flat_map(|b| b[i].clone()).collect()).collect();
            let mean: Rows = (0..y.len())
                .map(|i| (0..8).map(|j| branches.iter().map(|b| b[i][j]).sum::<f64>() / k).collect())
                .collect();
            n_add(&mean, &n_ffn(&n_layer_norm(&cat, p, ln), p, ffn))
        }
        FusionLayout::Attentional { ln_q, wq, wk, ln_ff, ffn } => {
            let qs = n_linear(&n_layer_norm(&y_bar, p, ln_q), p, wq);
            let keys: Vec<Rows> = branches.iter().map(|b| n_linear(b, p, wk)).collect();
            let fused: Rows = (0..y.len())
                .map(|i| {
                    let s: Vec<f64> = keys
                        .iter()
                        .map(|kb| qs[i].iter().zip(&kb[i]).map(|(x, z)| x * z).sum::<f64>() / 8f64.sqrt())
                        .collect();
                    let w = softmax(&s);
                    (0..8).map(|j| branches.iter().zip(&w).map(|(b, wi)| wi * b[i][j]).sum()).collect()
                })
                .collect();
            n_add(&fused, &n_ffn(&n_layer_norm(&fused, p, ln_ff), p, ffn))
        }
    };

    let (ym, am, vm, cm) = (to_matrix(&y), to_matrix(&a), to_matrix(&v), to_matrix(&c));
    let mut g = Graph::new();
    let mut net = Bound::new(&mut g, p, None);
    let yi = g.constant_ref(&ym);
    let streams = StreamVars {
        a: g.constant_ref(&am),
        v: g.constant_ref(&vm),
        c: use_caption.then(|| g.constant_ref(&cm)),
    };
    let bv = decoder_block_on(&mut g, &mut net, block, yi, &streams)?;
    Ok(max_diff(&out, g.value(bv.output)))
}

pub const BLOCK_TOLERANCE: f64 = 1e-10;

pub fn block_oracles(seeds: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for s in 0..seeds {
        worst = worst.max(encoder_block_gap(s)?);
        for (fusion, cap) in [
            (FusionMode::Concat, false),
            (FusionMode::Concat, true),
            (FusionMode::Attentional, false),
            (FusionMode::Attentional, true),
        ] {
            worst = worst.max(decoder_block_gap(s, fusion, cap)?);
        }
    }
    Ok(Check::new(
        "block equations vs naive loops",
        worst < BLOCK_TOLERANCE,
        format!("max abs difference {worst:.2e} over {seeds} seeds"),
    ))
}

/// A next-word model whose log probabilities are a fixed random function of
/// the prefix.
pub struct TableModel {
    pub vocab: usize,
    pub seed: u64,
}

impl NextWordModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut h = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for &t in prefix {
            h = (h ^ (t as u64 + 1)).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Ok(log_softmax(&logits))
    }
}

/// Best sequence by brute force: every sequence that ends at the end token
/// within `max_len`, plus every end-free sequence of exactly `max_len`.
pub fn exhaustive_best(model: &dyn NextWordModel, max_len: usize, length_normalize: bool) -> Result<Vec<usize>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let probs = model.log_probs(&prefix)?;
        for (y, &l) in probs.iter().enumerate() {
            let mut seq = prefix.clone();
            seq.push(y);
            let total = lp + l;
            if y == EOS_ID || seq.len() == max_len {
                let score = if length_normalize { total / seq.len() as f64 } else { total };
                if best.as_ref().map_or(true, |(b, _)| score > *b) {
                    best = Some((score, seq));
                }
            } else {
                stack.push((seq, total));
            }
        }
    }
    Ok(best.map(|b| b.1).unwrap_or_default())
}

pub fn beam_oracle(models: u64) -> Result<Check> {
    let mut mismatches = 0;
    for s in 0..models {
        let m = TableModel { vocab: 4, seed: s };
        for normalize in [true, false] {
            let cfg = SearchConfig {
                beam: 64,
                max_len: 3,
                length_normalize: normalize,
            };
            let beam = beam_search(&m, &cfg)?;
            if beam[0].tokens != exhaustive_best(&m, 3, normalize)? {
                mismatches += 1;
            }
        }
    }
    Ok(Check::new(
        "beam search vs exhaustive enumeration",
        mismatches == 0,
        format!("{mismatches} mismatches over {models} models, |V|=4, max_len=3, beam 64"),
    ))
}

pub fn ensemble_identities(seed: u64) -> Result<Check> {
    let mut problems = Vec::new();
    for s in 0..10 {
        let m = TableModel { vocab: 6, seed: seed + s };
        let ens = Ensemble::new(vec![&m, &m])?;
        let cfg = SearchConfig {
            beam: 3,
            max_len: 5,
            length_normalize: true,
        };
        if beam_search(&m, &cfg)?[0].tokens != beam_search(&ens, &cfg)?[0].tokens
            || greedy_decode(&m, 5)? != greedy_decode(&ens, 5)?
        {
            problems.push(format!("self-ensemble differs for model {s}"));
        }
    }
    let u = ensemble_next_distribution(&[0.8, 0.2], &[0.2, 0.8])?;
    if (u[0] - 0.5).abs() > 1e-12 || (u[1] - 0.5).abs() > 1e-12 {
        problems.push(format!("symmetric pair gave {u:?}"));
    }
    Ok(Check::new(
        "ensemble identities",
        problems.is_empty(),
        if problems.is_empty() {
            "self-ensemble token-identical on 10 models; symmetric pair uniform".to_string()
        } else {
            problems.join("; ")
        },
    ))
}

#[derive(Deserialize)]
pub struct CocoFixture {
    pub candidates: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Scores from the public MS COCO caption scorer on a 20-sentence toy set.
pub fn coco_fixture() -> CocoFixture {
    serde_json::from_str(include_str!("../fixtures/coco_toy.json")).expect("fixture parses")
}

pub const METRIC_TOLERANCE: f64 = 1e-4;

pub fn caption_metric_fixture() -> Result<Check> {
    let f = coco_fixture();
    let split = |s: &String| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let cands: Vec<Vec<String>> = f.candidates.iter().map(split).collect();
    let refs: Vec<Vec<Vec<String>>> = f.references.iter().map(|r| r.iter().map(split).collect()).collect();
    let got = [bleu4(&cands, &refs)?, rouge_l(&cands, &refs)?, cider_d(&cands, &refs)?];
    let want = [f.bleu4, f.rouge_l, f.cider_d];
    let gap = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Check::new(
        "BLEU4/ROUGE_L/CIDEr-D vs reference scorer",
        gap < METRIC_TOLERANCE,
        format!(
            "ours {:.6}/{:.6}/{:.6}, reference {:.6}/{:.6}/{:.6}",
            got[0], got[1], got[2], want[0], want[1], want[2]
        ),
    ))
}

/// Random region lists on a frame grid with jittered edges.
pub fn random_regions(rng: &mut ChaCha8Rng, duration: f64) -> Vec<TimeRegion> {
    (0..rng.gen_range(0..4))
        .map(|_| {
            let a = rng.gen_range(0.0..duration);
            let b = rng.gen_range(0.0..duration);
            TimeRegion::new(a.min(b), a.max(b))
        })
        .collect()
}

/// Frame-set IoU by testing every frame center up to `frames`.
pub fn iou2_brute_force(pred: &[TimeRegion], gt: &[TimeRegion], period: f64, frames: usize) -> f64 {
    let cover = |rs: &[TimeRegion]| -> BTreeSet<usize> {
        (0..frames)
            .filter(|&f| {
                let c = f as f64 * period + period / 2.0;
                rs.iter().any(|r| r.start <= c && c <= r.end)
            })
            .collect()
    };
    let (p, g) = (cover(pred), cover(gt));
    let union = p.union(&g).count();
    if union == 0 {
        return if pred == gt { 1.0 } else { 0.0 };
    }
    p.intersection(&g).count() as f64 / union as f64
}

pub fn iou2_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let period = [0.25, 0.5, 1.0, 0.4][rng.gen_range(0..4)];
        let (p, g) = (random_regions(&mut rng, 10.0), random_regions(&mut rng, 10.0));
        if iou2(&p, &g, period) != iou2_brute_force(&p, &g, period, (12.0 / period) as usize) {
            mismatches += 1;
        }
    }
    Check::new(
        "IoU-2 vs frame-set enumeration",
        mismatches == 0,
        format!("{mismatches} mismatches over {cases} random region sets"),
    )
}

/// Attention rows sum to one, the decoder is causal, interval IoU is
/// symmetric.
pub fn invariants(seed: u64) -> Result<Check> {
    let mut problems = Vec::new();
    let corpus = gradcheck_corpus(seed);
    let vocab = build_vocabulary(&corpus, 1);
    let model = AvsdModel::new(gradcheck_config(FusionMode::Attentional).with_caption(true), vocab, seed)?;
    let s = &corpus.samples[0];
    let streams = model.encode(corpus.features_for(s)?, s.caption.as_deref())?;
    let ids = vec![4, 5, 6, 7, 1, 8, 9];
    let state = model.next_word_distribution(&ids, &streams)?;
    let row_gap = state
        .source_attention
        .iter()
        .flatten()
        .flatten()
        .chain(state.fusion_weights.iter().flatten())
        .flat_map(|m| (0..m.rows()).map(move |r| (m.row(r).iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);
    if row_gap > 1e-9 {
        problems.push(format!("attention rows off by {row_gap:.1e}"));
    }
    let mut changed = ids.clone();
    changed[5] = 10;
    let other = model.next_word_distribution(&changed, &streams)?;
    let leak = state.layers[2].select_rows(&[0, 1, 2, 3, 4]).max_abs_diff(&other.layers[2].select_rows(&[0, 1, 2, 3, 4]));
    if leak != 0.0 {
        problems.push(format!("future token changed earlier rows by {leak:.1e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let (a, b) = (random_regions(&mut rng, 10.0), random_regions(&mut rng, 10.0));
        if let (Some(a), Some(b)) = (a.first(), b.first()) {
            if iou_interval(a, b) != iou_interval(b, a) {
                problems.push("interval IoU is not symmetric".into());
                break;
            }
        }
    }
    Ok(Check::new(
        "invariants",
        problems.is_empty(),
        if problems.is_empty() {
            "attention rows normalized; decoder causal; interval IoU symmetric".to_string()
        } else {
            problems.join("; ")
        },
    ))
}
