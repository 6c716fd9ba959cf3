//! Experiment commands: training, evaluation, timing, grid sweeps, the
//! verification suite and the downsampling demo.

pub mod bench;
pub mod config;
pub mod demo;
pub mod sweep;
pub mod train;
pub mod verify;

pub use config::{ArchConfig, DatasetConfig, Family, LrSchedule, Pooling, TrainConfig};
pub use train::{cmd_eval, cmd_train, evaluate, load_datasets, train_on, Datasets, EpochMetrics, RunMetrics};
