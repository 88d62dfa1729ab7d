use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four inference schemes sharing one generative model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Vae,
    Pcn,
    Svi,
    Ivae,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Vae, Scheme::Pcn, Scheme::Svi, Scheme::Ivae];

    pub fn tag(self) -> &'static str {
        match self {
            Scheme::Vae => "vae",
            Scheme::Pcn => "pcn",
            Scheme::Svi => "svi",
            Scheme::Ivae => "ivae",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Scheme::Vae),
            "pcn" => Ok(Scheme::Pcn),
            "svi" => Ok(Scheme::Svi),
            "ivae" => Ok(Scheme::Ivae),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }

    /// Whether the scheme refines its latent state per sample.
    pub fn is_iterative(self) -> bool {
        !matches!(self, Scheme::Vae)
    }

    pub fn uses_encoder(self) -> bool {
        matches!(self, Scheme::Vae | Scheme::Ivae)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Step counts and learning rates of one scheme. `lr` drives the θ and φ
/// updates; the inner rates drive the per-sample latent updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub scheme: Scheme,
    pub train_inner_steps: usize,
    pub eval_inner_steps: usize,
    pub train_inner_lr: f32,
    pub eval_inner_lr: f32,
    pub lr: f32,
    pub beta: f32,
    pub seed: u64,
}

impl InferenceConfig {
    /// Published settings: 20 training / 500 evaluation steps for SVI and
    /// iVAE (η_ψ 1e-2 / 1e-3), 100 / 500 for PCN (η_z 1e-2), η = 1e-3, β = 1.
    pub fn defaults(scheme: Scheme) -> Self {
        let (train_inner_steps, train_inner_lr, eval_inner_lr) = match scheme {
            Scheme::Vae => (0, 0.0, 0.0),
            Scheme::Pcn => (100, 1e-2, 1e-2),
            Scheme::Svi | Scheme::Ivae => (20, 1e-2, 1e-3),
        };
        InferenceConfig {
            scheme,
            train_inner_steps,
            eval_inner_steps: if scheme.is_iterative() { 500 } else { 0 },
            train_inner_lr,
            eval_inner_lr,
            lr: 1e-3,
            beta: 1.0,
            seed: 0,
        }
    }

    /// Inner steps in `mode`; always 0 for the single-pass VAE.
    pub fn steps(&self, mode: Mode) -> usize {
        match (self.scheme, mode) {
            (Scheme::Vae, _) => 0,
            (_, Mode::Train) => self.train_inner_steps,
            (_, Mode::Eval) => self.eval_inner_steps,
        }
    }

    pub fn inner_lr(&self, mode: Mode) -> f32 {
        match mode {
            Mode::Train => self.train_inner_lr,
            Mode::Eval => self.eval_inner_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("β = {} must be ≥ 0", self.beta)));
        }
        if self.scheme.is_iterative() {
            for (name, lr) in [("train", self.train_inner_lr), ("eval", self.eval_inner_lr)] {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::Config(format!(
                        "{name} inner learning rate {lr} must be > 0 for {}",
                        self.scheme
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vae_never_iterates() {
        let mut cfg = InferenceConfig::defaults(Scheme::Vae);
        cfg.train_inner_steps = 40;
        assert_eq!(cfg.steps(Mode::Train), 0);
        assert_eq!(cfg.steps(Mode::Eval), 0);
    }

    #[test]
    fn published_defaults() {
        let ivae = InferenceConfig::defaults(Scheme::Ivae);
        assert_eq!((ivae.train_inner_steps, ivae.eval_inner_steps), (20, 500));
        assert_eq!((ivae.train_inner_lr, ivae.eval_inner_lr), (1e-2, 1e-3));
        let pcn = InferenceConfig::defaults(Scheme::Pcn);
        assert_eq!((pcn.train_inner_steps, pcn.eval_inner_steps), (100, 500));
        assert_eq!((pcn.train_inner_lr, pcn.eval_inner_lr), (1e-2, 1e-2));
        assert_eq!(pcn.lr, 1e-3);
    }

    #[test]
    fn zero_inner_rate_is_rejected_for_iterative_schemes() {
        let mut cfg = InferenceConfig::defaults(Scheme::Svi);
        cfg.eval_inner_lr = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(InferenceConfig::defaults(Scheme::Vae).validate().is_ok());
    }

    #[test]
    fn tags_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(Scheme::from_tag(s.tag()).unwrap(), s);
        }
        assert!(Scheme::from_tag("cl").is_err());
    }
}
