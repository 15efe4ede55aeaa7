//! Fine-tuning loop, optimizers, evaluation metrics and the loss ablation.

mod ablation;
mod metrics;
mod optim;
mod train;

pub use ablation::{ablate, format_with_delta, AblationReport, AblationRow, AblationRun, LossSummary, LossTag};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use train::{encode_all, evaluate, train, train_with_observer, EpochRecord, History, StepInfo, TrainConfig, TrainOutcome};
