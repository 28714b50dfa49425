use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{LossReport, LossSums, Objective, Role, MODEL_TAG, TEACHER_TAG};
use super::optim::{clip_grad_norm, Adam, LrSchedule};
use crate::data::{Corpus, DialogSample, HistoryPolicy};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::AvsdModel;
use crate::nn::ParamSet;

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Dialogs per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the decoder-state similarity term.
    pub lambda_c: f64,
    #[serde(default = "yes")]
    pub lr_halving: bool,
    #[serde(default)]
    pub history_policy: HistoryPolicy,
    #[serde(default)]
    pub role: Role,
    /// Keep the teacher fixed during joint training.
    #[serde(default)]
    pub freeze_teacher: bool,
    /// Stop once an epoch's mean training loss drops below this value.
    #[serde(default)]
    pub target_train_loss: Option<f64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            lambda_c: 1.0,
            lr_halving: true,
            history_policy: HistoryPolicy::PreviousQuestionOnly,
            role: Role::Plain,
            freeze_teacher: false,
            target_train_loss: None,
            clip_norm: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("training.epochs and training.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        if !(self.lambda_c >= 0.0) {
            return Err(Error::Config("training.lambda_c must be non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("training.clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub ce: f64,
    pub st: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub log: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x0010_0000_01b3)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(batch as u64)
}

/// Hard cross entropy of `model` over every answer token of `corpus`.
pub fn evaluate_ce(model: &AvsdModel, corpus: &Corpus, policy: HistoryPolicy) -> Result<LossSums> {
    let obj = Objective {
        role: if model.uses_caption() { Role::Teacher } else { Role::Plain },
        model,
        teacher: None,
        lambda_c: 0.0,
        freeze_teacher: true,
        policy,
        dropout_seed: None,
        soft_targets: None,
    };
    let mut sums = LossSums::default();
    for sample in &corpus.samples {
        let mut g = Graph::new();
        let built = obj.build(&mut g, &model.params, None, corpus, &[sample])?;
        sums.add(&built.sums);
    }
    Ok(sums)
}

struct StepResult {
    sums: LossSums,
    model_grads: Vec<crate::tensor::Matrix>,
    teacher_grads: Option<Vec<crate::tensor::Matrix>>,
}

fn batch_gradients(
    obj: &Objective,
    model_params: &ParamSet,
    teacher_params: Option<&ParamSet>,
    corpus: &Corpus,
    batch: &[&DialogSample],
) -> Result<(f64, StepResult)> {
    let mut g = Graph::new();
    let built = obj.build(&mut g, model_params, teacher_params, corpus, batch)?;
    let (root, sums) = (built.root, built.sums);
    let loss = g.value(root).get(0, 0);
    let grads = g.backward(root);
    let model_grads = grads.for_tag(MODEL_TAG, &model_params.shapes());
    let teacher_grads = match teacher_params {
        Some(tp) if !obj.freeze_teacher => Some(grads.for_tag(TEACHER_TAG, &tp.shapes())),
        _ => None,
    };
    Ok((
        loss,
        StepResult {
            sums,
            model_grads,
            teacher_grads,
        },
    ))
}

/// Adam training with validation-driven learning-rate halving. The model
/// (and, under joint training, the teacher) end up holding the parameters of
/// the best validation epoch. Validation loss is the trained model's hard
/// cross entropy per answer token; with an empty validation split the
/// training loss stands in.
pub fn fit(
    model: &mut AvsdModel,
    mut teacher: Option<&mut AvsdModel>,
    train: &Corpus,
    val: &Corpus,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.samples.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if cfg.role == Role::StudentJstl && teacher.is_none() {
        return Err(Error::Config("joint training needs a teacher model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    let mut teacher_opt = teacher.as_ref().map(|t| Adam::new(&t.params, cfg.learning_rate));
    let mut schedule = LrSchedule::new(cfg.learning_rate, cfg.lr_halving);
    let mut best = (model.params.clone(), teacher.as_ref().map(|t| t.params.clone()));
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.samples.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sums = LossSums::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DialogSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let (loss, step) = {
                let obj = Objective {
                    role: cfg.role,
                    model,
                    teacher: teacher.as_deref(),
                    lambda_c: cfg.lambda_c,
                    freeze_teacher: cfg.freeze_teacher,
                    policy: cfg.history_policy,
                    dropout_seed: Some(dropout_seed(seed, epoch, b)),
                    soft_targets: None,
                };
                batch_gradients(&obj, &model.params, teacher.as_deref().map(|t| &t.params), train, &batch)?
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_sums.add(&step.sums);
            let mut grads = step.model_grads;
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            opt.lr = schedule.lr;
            opt.step(&mut model.params, &grads);
            if let (Some(t), Some(topt), Some(mut tg)) = (teacher.as_deref_mut(), teacher_opt.as_mut(), step.teacher_grads) {
                if let Some(c) = cfg.clip_norm {
                    clip_grad_norm(&mut tg, c);
                }
                topt.lr = schedule.lr;
                topt.step(&mut t.params, &tg);
            }
        }
        let train_report: LossReport = epoch_sums.report(cfg.lambda_c);
        let val_loss = if val.samples.is_empty() {
            train_report.total
        } else {
            evaluate_ce(model, val, cfg.history_policy)?.report(0.0).ce
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        let lr_used = schedule.lr;
        if schedule.observe(val_loss) {
            best = (model.params.clone(), teacher.as_ref().map(|t| t.params.clone()));
            best_epoch = epoch;
        }
        log.push(EpochMetrics {
            epoch,
            train_loss: train_report.total,
            val_loss,
            lr: lr_used,
            ce: train_report.ce,
            st: train_report.st,
            mse: train_report.mse,
        });
        if matches!(cfg.target_train_loss, Some(target) if train_report.total < target) {
            break;
        }
    }
    model.params = best.0;
    if let (Some(t), Some(tp)) = (teacher, best.1) {
        t.params = tp;
    }
    Ok(FitOutcome {
        log,
        best_epoch,
        best_val_loss: schedule.best,
    })
}

/// Metrics log as line-delimited JSON.
pub fn metrics_jsonl(log: &[EpochMetrics]) -> String {
    log.iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}
