//! The staged training paradigm: language-model pre-training on bodies,
//! adaptation on a headline-generation corpus, then fine-tuning on the
//! headline-editing task, with evaluation and hyper-parameter sweeps.

mod optim;
mod pas;
mod sweep;
mod train;

pub use optim::Adam;
pub use pas::{evaluate, evaluate_examples, prepare_data, run_pas, run_stages, Arm, PasOutcome, PipelineConfig, PreparedData, StageModels, StageSettings};
pub use sweep::{sweep, sweep_from, sweep_points, SweepParam, SweepRow, SweepTable};
pub use train::{loss_and_grads, train_stage, EvalPoint, LossKind, RunRecord, Stage, TrainConfig};
