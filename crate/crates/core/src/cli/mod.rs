//! Run configuration, checkpoints, cached assets and output files.

pub mod assets;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod output;

pub use assets::{AssetStore, TrainedModel};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{parse_level, Method, Profile, RunConfig};
