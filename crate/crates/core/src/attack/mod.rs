//! Losses, patch update rules and the learning-rate scheduler.

mod loss;
mod optim;
mod scheduler;

pub use loss::{
    detection_loss, total_loss, tv_loss, tv_loss_and_grad, ConfidenceReduction, DetectionLoss,
    TV_EPSILON,
};
pub use optim::{attack_step, AttackMethod, AttackParams, AttackState, StepOutcome};
pub use scheduler::{SchedulerParams, SchedulerState};
