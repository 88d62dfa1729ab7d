//! The four inference schemes and their learning steps.
//!
//! Every engine records the loss at its initial state (step 0) and after
//! each of its `K` latent updates, so traces hold `K + 1` steps. Inner loops
//! minimize the loss summed over the batch, which keeps each sample's
//! trajectory independent of the others; parameter updates use the batch
//! mean.

mod config;
mod engines;
mod learn;
mod noise;
mod trace;

pub use config::{InferenceConfig, Mode, Scheme};
pub use engines::{
    ivae_infer, pcn_infer, svi_infer, vae_infer, Engine, InferenceOutcome, Latent, NoiseSource,
    DIVERGENCE_LIMIT,
};
pub use learn::{fit, EpochStats, LearnGradients, Learner, LEARN_CHUNK};
pub use noise::NoiseTable;
pub use trace::{InferenceTrace, NullObserver, StepRecord, StepView, TraceObserver};
