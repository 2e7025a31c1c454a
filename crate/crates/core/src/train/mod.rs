//! Training harness: configuration, data, optimizer, checkpoints, the
//! training loop, evaluation reports and the ablation driver.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod report;
pub mod trainer;

pub use ablate::{run_ablation, AblationResult};
pub use checkpoint::Checkpoint;
pub use config::{AblationArm, ObjectiveKind, Sparsifier, TrainConfig};
pub use report::{evaluate_ppl, report, sparsity_on};
pub use trainer::{train, LogRow, Trainer};
