//! Training and evaluation harness: configuration, data, augmentation,
//! schedule, metrics, checkpoints and the command runners.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod plot;
pub mod runner;
pub mod schedule;

pub use config::TrainConfig;
pub use data::{Dataset, Sample};
pub use metrics::{evaluate_map, MapTable};
pub use schedule::{lr_at, Schedule};
