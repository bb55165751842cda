//! Joint teacher/student objective, optimizer and training loop.

mod loss;
mod optim;
mod train;

pub use loss::{
    loss_ce, loss_cos, loss_kl, loss_mae, loss_mse, loss_total, DistillPlan, KlConvention,
    LossBreakdown, LossKind,
};
pub use optim::{AdamW, LrSchedule, OptimConfig};
pub use train::{argmax_rows, evaluate, StepReport, TrainState, METRICS_HEADER};
