//! Training, sampling and evaluation harness.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod sample;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerConfig, RunConfig, Variant};
pub use train::{train, train_with, StepRecord, TrainRun, TrainScalar};
pub use sample::{sample, write_samples, SampleReport, Samples};
