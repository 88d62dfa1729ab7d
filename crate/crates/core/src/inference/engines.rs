use ndarray::{Array2, ArrayView2};

use super::config::{InferenceConfig, Mode, Scheme};
use super::noise::NoiseTable;
use super::trace::{InferenceTrace, StepView, TraceObserver};
use crate::error::{Error, Result};
use crate::models::{
    kl_diag_gaussian_to_standard, pc_loss_graph, vae_loss_graph, Encoder, GenerativeModel,
    LossBreakdown, VariationalParams,
};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Parameters, Tensor};

/// Mean per-sample loss beyond which an inner loop is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Final latent state of an inference run.
#[derive(Clone, Debug)]
pub enum Latent {
    Point(Array2<f32>),
    Gaussian(VariationalParams),
}

impl Latent {
    pub fn mean(&self) -> ArrayView2<'_, f32> {
        match self {
            Latent::Point(z) => z.view(),
            Latent::Gaussian(psi) => psi.mu.view2(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceOutcome {
    pub latent: Latent,
    /// Per-sample losses at the final step.
    pub losses: Vec<LossBreakdown>,
}

/// Where the reparameterization noise comes from: stream `ids[i]` of `seed`
/// for row `i`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSource<'a> {
    pub seed: u64,
    pub ids: &'a [u64],
}

/// Everything an engine reads. Parameters are borrowed immutably, so
/// inference can never modify them.
#[derive(Clone, Copy)]
pub struct Engine<'m> {
    pub model: &'m GenerativeModel,
    pub encoder: Option<&'m Encoder>,
    pub cfg: InferenceConfig,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m GenerativeModel, encoder: Option<&'m Encoder>, cfg: InferenceConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if cfg.scheme.uses_encoder() {
            let enc = encoder.ok_or_else(|| {
                Error::Contract(format!("{} inference needs an encoder", cfg.scheme))
            })?;
            if enc.latent_dim() != model.latent_dim() || enc.net.in_dim() != model.data_dim() {
                return Err(Error::Dimension(format!(
                    "encoder {}→{} vs decoder {}→{}",
                    enc.net.in_dim(),
                    enc.latent_dim(),
                    model.latent_dim(),
                    model.data_dim()
                )));
            }
        }
        Ok(Engine {
            model,
            encoder,
            cfg,
        })
    }

    pub fn steps(&self, mode: Mode) -> usize {
        self.cfg.steps(mode)
    }

    /// Runs inference on `x`, streaming every step to `obs`.
    pub fn run(
        &self,
        x: ArrayView2<f32>,
        mode: Mode,
        noise: NoiseSource<'_>,
        obs: &mut dyn TraceObserver,
    ) -> Result<InferenceOutcome> {
        if x.ncols() != self.model.data_dim() {
            return Err(Error::Dimension(format!(
                "{}-pixel input for a {}-pixel model",
                x.ncols(),
                self.model.data_dim()
            )));
        }
        if noise.ids.len() != x.nrows() {
            return Err(Error::Contract(format!(
                "{} noise ids for {} samples",
                noise.ids.len(),
                x.nrows()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("input images".into()));
        }
        let x = Tensor::from_array(x.to_owned());
        match self.cfg.scheme {
            Scheme::Pcn => self.run_point(&x, mode, obs),
            Scheme::Svi => {
                let psi = VariationalParams::standard(x.shape()[0], self.model.latent_dim());
                self.run_gaussian(&x, psi, mode, noise, obs)
            }
            Scheme::Vae | Scheme::Ivae => {
                let enc = self.encoder.expect("checked in Engine::new");
                let psi = enc.encode(x.view2())?;
                self.run_gaussian(&x, psi, mode, noise, obs)
            }
        }
    }

    /// Collects the full trace of a run.
    pub fn trace(&self, x: ArrayView2<f32>, mode: Mode, noise: NoiseSource<'_>) -> Result<InferenceTrace> {
        let mut trace = InferenceTrace::new(self.cfg.scheme);
        self.run(x, mode, noise, &mut trace)?;
        Ok(trace)
    }

    fn run_point(&self, x: &Tensor, mode: Mode, obs: &mut dyn TraceObserver) -> Result<InferenceOutcome> {
        let steps = self.cfg.steps(mode);
        let mut z = Tensor::zeros(&[x.shape()[0], self.model.latent_dim()]);
        let mut opt = AdamState::new(&z, AdamConfig::with_lr(self.cfg.inner_lr(mode)));
        let mut losses = Vec::new();
        for k in 0..=steps {
            let update = k < steps;
            let grad = {
                let mut g = Graph::new();
                let xv = g.constant_ref(x);
                let zv = if update { g.param(&z) } else { g.constant_ref(&z) };
                let gl = pc_loss_graph(&mut g, self.model, false, xv, zv)?;
                let xhat = g.value(gl.reconstruction_image);
                let prior: Vec<f32> = z
                    .data()
                    .chunks(self.model.latent_dim())
                    .map(|r| {
                        0.5 * r
                            .iter()
                            .zip(&self.model.prior_mu)
                            .map(|(a, m)| (a - m) * (a - m))
                            .sum::<f32>()
                            / self.model.prior_sigma_sq
                    })
                    .collect();
                losses = per_sample_losses(x.data(), xhat, self.model.sigma_x_sq, &prior, 1.0);
                guard(k, &losses)?;
                let recon = obs.wants_reconstruction(k).then(|| g.view2(gl.reconstruction_image));
                obs.observe(&StepView {
                    step: k,
                    mu: z.view2(),
                    log_var: None,
                    losses: &losses,
                    reconstruction: recon,
                })?;
                if update {
                    let mut grads = g.backward(gl.total)?;
                    grads.take(zv)
                } else {
                    None
                }
            };
            if update {
                let grad = grad.unwrap_or_else(|| vec![0.0; z.len()]);
                z.accumulate_grad(&grad)?;
                adam_step(&mut z, &mut opt)?;
            }
        }
        Ok(InferenceOutcome {
            latent: Latent::Point(z.to_array2()),
            losses,
        })
    }

    fn run_gaussian(
        &self,
        x: &Tensor,
        mut psi: VariationalParams,
        mode: Mode,
        noise: NoiseSource<'_>,
        obs: &mut dyn TraceObserver,
    ) -> Result<InferenceOutcome> {
        let steps = self.cfg.steps(mode);
        let table = NoiseTable::new(noise.seed, noise.ids, steps + 1, psi.latent_dim());
        let mut opt = AdamState::new(&psi, AdamConfig::with_lr(self.cfg.inner_lr(mode)));
        let mut losses = Vec::new();
        for k in 0..=steps {
            let update = k < steps;
            let eps = table.step(k);
            let grads = {
                let mut g = Graph::new();
                let xv = g.constant_ref(x);
                let (mu, lv) = if update {
                    (g.param(&psi.mu), g.param(&psi.log_var))
                } else {
                    (g.constant_ref(&psi.mu), g.constant_ref(&psi.log_var))
                };
                let gl = vae_loss_graph(&mut g, self.model, false, xv, mu, lv, &eps, self.cfg.beta)?;
                let kl = kl_diag_gaussian_to_standard(&psi)?;
                losses = per_sample_losses(
                    x.data(),
                    g.value(gl.reconstruction_image),
                    self.model.sigma_x_sq,
                    &kl,
                    self.cfg.beta,
                );
                guard(k, &losses)?;
                let recon = if obs.wants_reconstruction(k) {
                    Some(self.model.decode(psi.mu.view2())?)
                } else {
                    None
                };
                obs.observe(&StepView {
                    step: k,
                    mu: psi.mu.view2(),
                    log_var: Some(psi.log_var.view2()),
                    losses: &losses,
                    reconstruction: recon.as_ref().map(|r| r.view()),
                })?;
                if update {
                    let grads = g.backward(gl.total)?;
                    Some((grads, [mu, lv]))
                } else {
                    None
                }
            };
            if let Some((grads, handles)) = grads {
                psi.store_grads(&grads, &handles)?;
                adam_step(&mut psi, &mut opt)?;
            }
        }
        Ok(InferenceOutcome {
            latent: Latent::Gaussian(psi),
            losses,
        })
    }
}

/// Per-sample `½‖x − x̂‖²/σ²_x` combined with a per-sample regularizer.
pub(crate) fn per_sample_losses(
    x: &[f32],
    xhat: &[f32],
    sigma_x_sq: f32,
    regularizer: &[f32],
    weight: f32,
) -> Vec<LossBreakdown> {
    let n = x.len() / regularizer.len().max(1);
    x.chunks(n)
        .zip(xhat.chunks(n))
        .zip(regularizer)
        .map(|((a, b), &reg)| {
            let reconstruction = 0.5
                * a.iter()
                    .zip(b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f32>()
                / sigma_x_sq;
            LossBreakdown {
                reconstruction,
                kl_or_prior: reg,
                total: reconstruction + weight * reg,
            }
        })
        .collect()
}

fn guard(step: usize, losses: &[LossBreakdown]) -> Result<()> {
    let mean = losses.iter().map(|l| l.total as f64).sum::<f64>() / losses.len().max(1) as f64;
    if !mean.is_finite() || mean > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, loss: mean });
    }
    Ok(())
}

/// Evaluation-mode trace of the predictive-coding scheme.
pub fn pcn_infer(model: &GenerativeModel, x: ArrayView2<f32>, cfg: InferenceConfig) -> Result<InferenceTrace> {
    let ids: Vec<u64> = (0..x.nrows() as u64).collect();
    let cfg = InferenceConfig { scheme: Scheme::Pcn, ..cfg };
    Engine::new(model, None, cfg)?.trace(x, Mode::Eval, NoiseSource { seed: cfg.seed, ids: &ids })
}

/// Evaluation-mode trace of SVI from the prior.
pub fn svi_infer(model: &GenerativeModel, x: ArrayView2<f32>, cfg: InferenceConfig) -> Result<InferenceTrace> {
    let ids: Vec<u64> = (0..x.nrows() as u64).collect();
    let cfg = InferenceConfig { scheme: Scheme::Svi, ..cfg };
    Engine::new(model, None, cfg)?.trace(x, Mode::Eval, NoiseSource { seed: cfg.seed, ids: &ids })
}

/// Evaluation-mode trace of SVI started from the encoder's posterior.
pub fn ivae_infer(
    model: &GenerativeModel,
    encoder: &Encoder,
    x: ArrayView2<f32>,
    cfg: InferenceConfig,
) -> Result<InferenceTrace> {
    let ids: Vec<u64> = (0..x.nrows() as u64).collect();
    let cfg = InferenceConfig { scheme: Scheme::Ivae, ..cfg };
    Engine::new(model, Some(encoder), cfg)?.trace(x, Mode::Eval, NoiseSource { seed: cfg.seed, ids: &ids })
}

/// The single amortized pass, as a one-record trace.
pub fn vae_infer(
    model: &GenerativeModel,
    encoder: &Encoder,
    x: ArrayView2<f32>,
    cfg: InferenceConfig,
) -> Result<InferenceTrace> {
    let ids: Vec<u64> = (0..x.nrows() as u64).collect();
    let cfg = InferenceConfig { scheme: Scheme::Vae, ..cfg };
    Engine::new(model, Some(encoder), cfg)?.trace(x, Mode::Eval, NoiseSource { seed: cfg.seed, ids: &ids })
}
