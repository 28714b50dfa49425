//! Losses, optimization and gradient checking.

mod fit;
mod gradcheck;
mod losses;
mod optim;

pub use fit::{evaluate_ce, fit, metrics_jsonl, EpochMetrics, FitOutcome, TrainingConfig};
pub use gradcheck::{check_gradients, gradient_check, relative_error, GradCheckReport, GroupError};
pub use losses::{
    cross_entropy_loss, state_similarity_loss, BuiltLoss, student_teacher_loss, LossReport, LossSums, Objective, Role,
    TurnExample, MODEL_TAG, PROB_FLOOR, TEACHER_TAG,
};
pub use optim::{clip_grad_norm, Adam, LrSchedule};
