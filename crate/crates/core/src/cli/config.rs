use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{CorruptionSpec, NoiseKind};
use crate::error::{Error, Result};
use crate::inference::{InferenceConfig, Scheme};
pub use crate::eval::Method;

/// Scale of a run. `Full` follows the published protocol; `Desk` trains for
/// 20 epochs and evaluates with 200 inner steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn tag(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }

    pub fn epochs(self) -> usize {
        match self {
            Profile::Desk => 20,
            Profile::Full => 200,
        }
    }

    pub fn eval_inner_steps(self) -> usize {
        match self {
            Profile::Desk => 200,
            Profile::Full => 500,
        }
    }

    pub fn classifier_epochs(self) -> usize {
        match self {
            Profile::Desk => 2,
            Profile::Full => 14,
        }
    }
}

/// Everything that determines a run's outputs. Written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub scheme: Scheme,
    pub profile: Profile,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta: f32,
    pub latent_dim: usize,
    pub train_inner_steps: usize,
    pub eval_inner_steps: usize,
    pub train_inner_lr: f32,
    pub eval_inner_lr: f32,
    pub noise: NoiseKind,
    pub level: f32,
    pub seed: u64,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    /// Evaluate on the first `n` test images only.
    pub eval_samples: Option<usize>,
    /// Classify every `n`-th inference step (plus the last) in `eval`.
    #[serde(default = "one")]
    pub step_stride: usize,
}

impl RunConfig {
    pub fn new(command: &str, scheme: Scheme, profile: Profile) -> Self {
        let inf = InferenceConfig::defaults(scheme);
        RunConfig {
            command: command.to_string(),
            scheme,
            profile,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("out"),
            epochs: profile.epochs(),
            batch_size: 1024,
            lr: inf.lr,
            beta: inf.beta,
            latent_dim: 15,
            train_inner_steps: inf.train_inner_steps,
            eval_inner_steps: if scheme.is_iterative() { profile.eval_inner_steps() } else { 0 },
            train_inner_lr: inf.train_inner_lr,
            eval_inner_lr: inf.eval_inner_lr,
            noise: NoiseKind::None,
            level: 0.0,
            seed: 0,
            classifier_epochs: profile.classifier_epochs(),
            classifier_batch_size: 64,
            eval_samples: None,
            step_stride: 1,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            scheme: self.scheme,
            train_inner_steps: self.train_inner_steps,
            eval_inner_steps: self.eval_inner_steps,
            train_inner_lr: self.train_inner_lr,
            eval_inner_lr: self.eval_inner_lr,
            lr: self.lr,
            beta: self.beta,
            seed: self.seed,
        }
    }

    /// Copies scheme-dependent defaults for `scheme` while keeping the shared
    /// fields (profile, directories, β, latent size, seed).
    pub fn for_scheme(&self, scheme: Scheme) -> Self {
        let mut out = RunConfig::new(&self.command, scheme, self.profile);
        out.data_dir = self.data_dir.clone();
        out.out_dir = self.out_dir.clone();
        out.epochs = self.epochs;
        out.batch_size = self.batch_size;
        out.lr = self.lr;
        out.beta = self.beta;
        out.latent_dim = self.latent_dim;
        out.noise = self.noise;
        out.level = self.level;
        out.seed = self.seed;
        out.classifier_epochs = self.classifier_epochs;
        out.classifier_batch_size = self.classifier_batch_size;
        out.eval_samples = self.eval_samples;
        out.step_stride = self.step_stride;
        out
    }

    pub fn corruption(&self) -> CorruptionSpec {
        CorruptionSpec::new(self.noise, self.level, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be ≥ 1".into()));
        }
        if self.classifier_batch_size == 0 {
            return Err(Error::Config("classifier batch size must be ≥ 1".into()));
        }
        if self.eval_samples == Some(0) {
            return Err(Error::Config("--eval-samples must be ≥ 1".into()));
        }
        self.inference().validate()?;
        self.corruption().validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

fn one() -> usize {
    1
}

/// Parses `--level`: an index 1..=4 selects the canonical level of `kind`,
/// anything else is taken as an explicit value.
pub fn parse_level(kind: NoiseKind, raw: &str) -> Result<f32> {
    if let Ok(i) = raw.parse::<usize>() {
        if (1..=4).contains(&i) && kind != NoiseKind::None {
            return kind.canonical_level(i);
        }
    }
    let v: f32 = raw
        .parse()
        .map_err(|_| Error::Config(format!("noise level {raw:?} is neither 1..4 nor a number")))?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Parameter(format!("noise level {v} must be ≥ 0")));
    }
    Ok(v)
}
