//! Optimizer, learning-rate schedule, checkpoints and the training loop.

mod adam;
pub mod checkpoint;
mod config;
mod scheduler;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use config::RunConfig;
pub use scheduler::PlateauScheduler;
pub use trainer::{best_checkpoint_path, evaluate, train, EpochRecord, TrainOutcome, LOG_HEADER};
