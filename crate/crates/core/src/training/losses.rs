//! Loss functions, both as plain-value references and as tape builders.

use serde::{Deserialize, Serialize};

use crate::data::{build_decoder_context, Corpus, DialogSample, HistoryPolicy, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::AvsdModel;
use crate::nn::{Bound, ParamSet};
use crate::tensor::{softmax, Matrix};

pub const PROB_FLOOR: f64 = 1e-12;

/// `−Σ_t ln max(p_t[y_t], floor)`; padding targets are skipped.
pub fn cross_entropy_loss(distributions: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if distributions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} distributions for {} targets",
            distributions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in distributions.iter().zip(targets) {
        if y == PAD_ID {
            continue;
        }
        let py = *p.get(y).ok_or(Error::OutOfVocabulary { id: y, size: p.len() })?;
        total -= py.max(PROB_FLOOR).ln();
    }
    Ok(total)
}

/// `−Σ_t Σ_y teacher_t[y] · ln max(student_t[y], floor)`.
pub fn student_teacher_loss(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "{} teacher positions vs {} student positions",
            teacher.len(),
            student.len()
        )));
    }
    let mut total = 0.0;
    for (pt, ps) in teacher.iter().zip(student) {
        if pt.len() != ps.len() {
            return Err(Error::VocabularyMismatch(format!("{} vs {} tokens", pt.len(), ps.len())));
        }
        for (t, s) in pt.iter().zip(ps) {
            if *t != 0.0 {
                total -= t * s.max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(total)
}

/// Sum over positions (rows) of the mean squared difference across the width.
pub fn state_similarity_loss(student: &Matrix, teacher: &Matrix) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student states {:?} vs teacher states {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    Ok(student.sub(teacher).sum_squares() / student.cols().max(1) as f64)
}

/// Per-token loss components.
///
/// `ce` is the hard-target cross entropy of the network receiving it: the
/// teacher under joint training, the trained model otherwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub st: f64,
    pub mse: f64,
    pub tokens: usize,
}

impl LossReport {
    pub fn weighted_sum(&self, lambda_c: f64) -> f64 {
        self.st + lambda_c * self.mse + self.ce
    }
}

/// Raw sums over a batch before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSums {
    pub ce: f64,
    pub st: f64,
    pub mse: f64,
    pub tokens: usize,
}

impl LossSums {
    pub fn add(&mut self, o: &LossSums) {
        self.ce += o.ce;
        self.st += o.st;
        self.mse += o.mse;
        self.tokens += o.tokens;
    }

    pub fn report(&self, lambda_c: f64) -> LossReport {
        let n = self.tokens.max(1) as f64;
        let (ce, st, mse) = (self.ce / n, self.st / n, self.mse / n);
        LossReport {
            total: st + lambda_c * mse + ce,
            ce,
            st,
            mse,
            tokens: self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Caption-reading model, hard cross entropy.
    Teacher,
    /// Caption-free model trained jointly with a teacher.
    StudentJstl,
    /// Caption-free model, hard cross entropy.
    #[default]
    Plain,
}

/// Tape tags for the two networks that may share a graph.
pub const MODEL_TAG: u32 = 1;
pub const TEACHER_TAG: u32 = 0;

/// One decoding target: the context ids followed by the answer, and the
/// answer-plus-end targets predicted from positions `L−1 … L−1+n`.
pub struct TurnExample {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub first: usize,
}

impl TurnExample {
    pub fn new(model: &AvsdModel, sample: &DialogSample, turn: usize, policy: HistoryPolicy) -> Result<Self> {
        let mut input = model.vocab.encode(&build_decoder_context(sample, turn, policy)?);
        let first = input.len() - 1;
        let answer = model.vocab.encode(&sample.turns[turn].answer);
        input.extend_from_slice(&answer);
        let mut targets = answer;
        targets.push(EOS_ID);
        Ok(Self { input, targets, first })
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.first..self.first + self.targets.len()).collect()
    }

    pub fn one_hot(&self, vocab: usize) -> Matrix {
        let mut m = Matrix::zeros(self.targets.len(), vocab);
        for (r, &y) in self.targets.iter().enumerate() {
            if y != PAD_ID {
                m.set(r, y, 1.0);
            }
        }
        m
    }
}

/// Everything needed to put a batch objective on a tape.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub role: Role,
    pub model: &'a AvsdModel,
    pub teacher: Option<&'a AvsdModel>,
    pub lambda_c: f64,
    pub freeze_teacher: bool,
    pub policy: HistoryPolicy,
    /// Dropout seed; `None` evaluates without dropout.
    pub dropout_seed: Option<u64>,
    /// Soft targets to use instead of the teacher's current outputs, one
    /// matrix per turn in batch order. Lets a finite-difference check hold
    /// the stop-gradient targets fixed while teacher parameters move.
    pub soft_targets: Option<&'a [Matrix]>,
}

/// Result of putting a batch objective on a tape.
pub struct BuiltLoss {
    /// Per-token mean of the weighted objective.
    pub root: Var,
    pub sums: LossSums,
    /// Teacher soft targets used, one per turn (joint training only).
    pub soft_targets: Vec<Matrix>,
}

impl<'a> Objective<'a> {
    pub fn validate(&self) -> Result<()> {
        match self.role {
            Role::Teacher if !self.model.uses_caption() => {
                Err(Error::Config("the teacher role needs decoder.use_caption = true".into()))
            }
            Role::Plain if self.model.uses_caption() => {
                Err(Error::Config("the plain role trains a caption-free model".into()))
            }
            Role::StudentJstl => {
                let t = self
                    .teacher
                    .ok_or_else(|| Error::Config("joint training needs a teacher".into()))?;
                if self.model.uses_caption() || !t.uses_caption() {
                    return Err(Error::Config(
                        "joint training pairs a caption-reading teacher with a caption-free student".into(),
                    ));
                }
                if t.vocab != self.model.vocab {
                    return Err(Error::VocabularyMismatch("teacher and student vocabularies differ".into()));
                }
                let (dt, ds) = (&t.config.decoder, &self.model.config.decoder);
                if dt.d != ds.d {
                    return Err(Error::Config("teacher and student decoder widths differ".into()));
                }
                if self.lambda_c > 0.0 && (dt.blocks % 2 != 0 || ds.blocks % 2 != 0) {
                    return Err(Error::Config(
                        "the state-similarity loss needs an even number of decoder blocks".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn build<'p>(
        &self,
        g: &mut Graph<'p>,
        model_params: &'p ParamSet,
        teacher_params: Option<&'p ParamSet>,
        corpus: &'p Corpus,
        samples: &[&'p DialogSample],
    ) -> Result<BuiltLoss> {
        self.validate()?;
        let seed = self.dropout_seed;
        let rate = self.model.config.dropout;
        let mut net = Bound::new(g, model_params, Some(MODEL_TAG));
        if let Some(s) = seed {
            net = net.with_dropout(rate, s);
        }
        let mut teacher_net = match (self.role, self.teacher, teacher_params) {
            (Role::StudentJstl, Some(t), Some(tp)) => {
                let tag = (!self.freeze_teacher).then_some(TEACHER_TAG);
                let mut b = Bound::new(g, tp, tag);
                if let Some(s) = seed {
                    b = b.with_dropout(t.config.dropout, s ^ 0x9e37_79b9_7f4a_7c15);
                }
                Some(b)
            }
            (Role::StudentJstl, _, _) => {
                return Err(Error::Config("joint training needs teacher parameters".into()))
            }
            _ => None,
        };

        let vocab = self.model.vocab.len();
        let mut parts = Vec::new();
        let mut sums = LossSums::default();
        let mut used_targets = Vec::new();
        for sample in samples {
            let fs = corpus.features_for(sample)?;
            let streams = self.model.encode_on(g, &mut net, fs, sample.caption.as_deref())?;
            let teacher_streams = match (&mut teacher_net, self.teacher) {
                (Some(tn), Some(t)) => Some(t.encode_on(g, tn, fs, sample.caption.as_deref())?),
                _ => None,
            };
            for turn in 0..sample.turns.len() {
                let ex = TurnExample::new(self.model, sample, turn, self.policy)?;
                let rows = ex.positions();
                let out = self.model.decode_on(g, &mut net, &streams, &ex.input)?;
                let logits = g.select_rows(out.logits, &rows);
                sums.tokens += ex.targets.iter().filter(|&&y| y != PAD_ID).count();
                match (self.role, &mut teacher_net, self.teacher, &teacher_streams) {
                    (Role::StudentJstl, Some(tn), Some(t), Some(ts)) => {
                        let tout = t.decode_on(g, tn, ts, &ex.input)?;
                        let tlogits = g.select_rows(tout.logits, &rows);
                        // Soft targets are constants: no gradient reaches the teacher here.
                        let soft = match self.soft_targets {
                            Some(fixed) => fixed
                                .get(used_targets.len())
                                .cloned()
                                .ok_or_else(|| Error::Validation("too few fixed soft targets".into()))?,
                            None => Matrix::from_rows(
                                &(0..rows.len())
                                    .map(|r| softmax(g.value(tlogits).row(r)))
                                    .collect::<Vec<_>>(),
                            ),
                        };
                        used_targets.push(soft.clone());
                        let st = g.soft_cross_entropy(logits, soft, PROB_FLOOR);
                        let ce = g.soft_cross_entropy(tlogits, ex.one_hot(vocab), PROB_FLOOR);
                        sums.st += g.value(st).get(0, 0);
                        sums.ce += g.value(ce).get(0, 0);
                        parts.push(st);
                        parts.push(ce);
                        if self.lambda_c > 0.0 {
                            let m = self.model.config.decoder.middle_layer();
                            let mt = t.config.decoder.middle_layer();
                            let ys = g.select_rows(out.layers[m], &rows);
                            let yt = g.select_rows(tout.layers[mt], &rows);
                            let mse = g.squared_error(ys, yt);
                            sums.mse += g.value(mse).get(0, 0);
                            let weighted = g.scale(mse, self.lambda_c);
                            parts.push(weighted);
                        }
                    }
                    _ => {
                        let ce = g.soft_cross_entropy(logits, ex.one_hot(vocab), PROB_FLOOR);
                        sums.ce += g.value(ce).get(0, 0);
                        parts.push(ce);
                    }
                }
            }
        }
        if parts.is_empty() {
            return Err(Error::Validation("batch contains no dialog turns".into()));
        }
        let total = g.sum(&parts);
        let root = g.scale(total, 1.0 / sums.tokens.max(1) as f64);
        Ok(BuiltLoss {
            root,
            sums,
            soft_targets: used_targets,
        })
    }
}
