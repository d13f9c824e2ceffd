//! Synthetic vision-language-action training harness.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod run;
pub mod task;
pub mod train;

pub use config::{Baseline, RunConfig};
pub use eval::{eval_set, evaluate, usage_entropy, EvalMetrics};
pub use metrics::{params_hash, read_csv, write_csv, LogRow, Manifest};
pub use model::{AdamW, Student, Teacher};
pub use run::{load_checkpoint, run_training, save_checkpoint, sweep, sweep_means, RunOutput, SweepRow};
pub use task::{gen_batch, ActionNormalizer, SyntheticTask, TaskConfig};
pub use train::{train_step, Event, Phase, StepMetrics, TrainState};
