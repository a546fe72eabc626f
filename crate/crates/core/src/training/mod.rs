//! Adam, plateau scheduling, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod scheduler;
mod trainer;

pub use adam::{Adam, AdamScalars};
pub use checkpoint::TrainingState;
pub use scheduler::{DevScore, PlateauScheduler, SchedulerAction};
pub use trainer::{param_hash, train, LogEntry, OutputDir, StopReason, TrainOutcome, Trainer, BEST_CHECKPOINT, TRAINING_LOG};
