use ndarray::{s, ArrayView2};

use super::config::{InferenceConfig, Mode, Scheme};
use super::engines::{Engine, Latent, NoiseSource};
use super::noise::NoiseTable;
use super::trace::NullObserver;
use crate::data::{batch_indices, gather, Dataset};
use crate::error::{Error, Result};
use crate::models::{pc_loss_graph, vae_loss_graph, Encoder, GenerativeModel, LossBreakdown};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, Graph, Parameters, Tensor, Var};
use crate::par::{map_chunks, Exec};
use crate::rng::{derive_seed, stream_rng, tags};

/// Rows per independent work unit of a learning step. Fixed so that the
/// summation order, and therefore every bit of the result, is the same for
/// sequential and parallel execution.
pub const LEARN_CHUNK: usize = 256;

/// Batch-mean gradients of one learning step, one buffer per tensor in
/// [`Parameters::tensors`] order.
#[derive(Clone, Debug)]
pub struct LearnGradients {
    pub theta: Vec<Vec<f32>>,
    pub phi: Option<Vec<Vec<f32>>>,
    /// Batch-mean loss the θ gradient was taken from.
    pub loss: LossBreakdown,
}

struct ChunkGrads {
    theta: Vec<Vec<f32>>,
    phi: Option<Vec<Vec<f32>>>,
    sums: [f64; 3],
}

/// A generative model (plus encoder where the scheme has one) together with
/// its optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: GenerativeModel,
    pub encoder: Option<Encoder>,
    pub cfg: InferenceConfig,
    pub exec: Exec,
    theta_opt: AdamState,
    phi_opt: Option<AdamState>,
}

impl Learner {
    /// Freshly initialized networks for `cfg.scheme`, seeded by `cfg.seed`.
    pub fn new(cfg: InferenceConfig, latent_dim: usize) -> Result<Self> {
        let mut rng = stream_rng(derive_seed(&[tags::INIT, cfg.seed]), 0);
        let model = GenerativeModel::new(latent_dim, &mut rng);
        let encoder = cfg
            .scheme
            .uses_encoder()
            .then(|| Encoder::new(latent_dim, &mut rng));
        Learner::from_parts(model, encoder, cfg)
    }

    pub fn from_parts(model: GenerativeModel, encoder: Option<Encoder>, cfg: InferenceConfig) -> Result<Self> {
        Engine::new(&model, encoder.as_ref(), cfg)?;
        if !cfg.scheme.uses_encoder() && encoder.is_some() {
            return Err(Error::Contract(format!("{} has no encoder", cfg.scheme)));
        }
        let theta_opt = AdamState::new(&model, AdamConfig::with_lr(cfg.lr));
        let phi_opt = encoder
            .as_ref()
            .map(|e| AdamState::new(e, AdamConfig::with_lr(cfg.lr)));
        Ok(Learner {
            model,
            encoder,
            cfg,
            exec: Exec::default(),
            theta_opt,
            phi_opt,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn engine(&self) -> Engine<'_> {
        Engine {
            model: &self.model,
            encoder: self.encoder.as_ref(),
            cfg: self.cfg,
        }
    }

    /// Gradients of one learning step on `x` without applying them.
    /// Reparameterization noise for row `i` is stream `i` of `noise_seed`.
    pub fn gradients(&self, x: ArrayView2<f32>, noise_seed: u64) -> Result<LearnGradients> {
        let b = x.nrows();
        if b == 0 {
            return Err(Error::Parameter("empty batch".into()));
        }
        let parts = map_chunks(self.exec, b, LEARN_CHUNK, |r| {
            let ids: Vec<u64> = (r.start as u64..r.end as u64).collect();
            self.chunk_gradients(x.slice(s![r.clone(), ..]), noise_seed, &ids)
        })?;
        let mut iter = parts.into_iter();
        let first = iter.next().expect("non-empty batch");
        let mut theta = first.theta;
        let mut phi = first.phi;
        let mut sums = first.sums;
        for p in iter {
            add_into(&mut theta, &p.theta);
            if let (Some(acc), Some(v)) = (phi.as_mut(), p.phi.as_ref()) {
                add_into(acc, v);
            }
            for (a, v) in sums.iter_mut().zip(p.sums) {
                *a += v;
            }
        }
        let inv = 1.0 / b as f32;
        scale(&mut theta, inv);
        if let Some(phi) = phi.as_mut() {
            scale(phi, inv);
        }
        let n = b as f64;
        Ok(LearnGradients {
            theta,
            phi,
            loss: LossBreakdown {
                reconstruction: (sums[0] / n) as f32,
                kl_or_prior: (sums[1] / n) as f32,
                total: (sums[2] / n) as f32,
            },
        })
    }

    fn chunk_gradients(&self, x: ArrayView2<f32>, noise_seed: u64, ids: &[u64]) -> Result<ChunkGrads> {
        let xt = Tensor::from_array(x.to_owned());
        let scheme = self.cfg.scheme;
        let steps = self.cfg.steps(Mode::Train);
        let beta = self.cfg.beta;
        let d = self.model.latent_dim();

        if scheme == Scheme::Vae {
            let enc = self.encoder.as_ref().expect("vae has an encoder");
            let table = NoiseTable::new(noise_seed, ids, 1, d);
            let mut g = Graph::new();
            let xv = g.constant_ref(&xt);
            let (mu, lv, enc_h) = enc.forward(&mut g, xv, true)?;
            let gl = vae_loss_graph(&mut g, &self.model, true, xv, mu, lv, &table.step(0), beta)?;
            let sums = loss_sums(&g, gl.reconstruction, gl.kl_or_prior, gl.total);
            let grads = g.backward(gl.total)?;
            return Ok(ChunkGrads {
                theta: collect(&grads, &gl.decoder.0, &self.model),
                phi: Some(collect(&grads, &enc_h.0, enc)),
                sums,
            });
        }

        let outcome = self.engine().run(
            x,
            Mode::Train,
            NoiseSource {
                seed: noise_seed,
                ids,
            },
            &mut NullObserver,
        )?;

        let (theta, sums) = match &outcome.latent {
            Latent::Point(z) => {
                let zt = Tensor::from_array(z.clone());
                let mut g = Graph::new();
                let xv = g.constant_ref(&xt);
                let zv = g.constant_ref(&zt);
                let gl = pc_loss_graph(&mut g, &self.model, true, xv, zv)?;
                let sums = loss_sums(&g, gl.reconstruction, gl.kl_or_prior, gl.total);
                let grads = g.backward(gl.total)?;
                (collect(&grads, &gl.decoder.0, &self.model), sums)
            }
            Latent::Gaussian(psi_k) => {
                let table = NoiseTable::new(noise_seed, ids, steps + 1, d);
                let mut g = Graph::new();
                let xv = g.constant_ref(&xt);
                let mu = g.constant_ref(&psi_k.mu);
                let lv = g.constant_ref(&psi_k.log_var);
                let gl = vae_loss_graph(&mut g, &self.model, true, xv, mu, lv, &table.step(steps), beta)?;
                let sums = loss_sums(&g, gl.reconstruction, gl.kl_or_prior, gl.total);
                let grads = g.backward(gl.total)?;
                (collect(&grads, &gl.decoder.0, &self.model), sums)
            }
        };

        let phi = if scheme == Scheme::Ivae {
            // Encoder gradient at ψ₀ with the decoder as it was before this step.
            let enc = self.encoder.as_ref().expect("ivae has an encoder");
            let table = NoiseTable::new(noise_seed, ids, 1, d);
            let mut g = Graph::new();
            let xv = g.constant_ref(&xt);
            let (mu, lv, enc_h) = enc.forward(&mut g, xv, true)?;
            let gl = vae_loss_graph(&mut g, &self.model, false, xv, mu, lv, &table.step(0), beta)?;
            let grads = g.backward(gl.total)?;
            Some(collect(&grads, &enc_h.0, enc))
        } else {
            None
        };
        Ok(ChunkGrads { theta, phi, sums })
    }

    /// Applies previously computed gradients with one Adam step on θ (and φ).
    pub fn apply(&mut self, grads: &LearnGradients) -> Result<()> {
        load_grads(&mut self.model, &grads.theta)?;
        adam_step(&mut self.model, &mut self.theta_opt)?;
        match (self.encoder.as_mut(), self.phi_opt.as_mut(), grads.phi.as_ref()) {
            (Some(enc), Some(opt), Some(phi)) => {
                load_grads(enc, phi)?;
                adam_step(enc, opt)?;
            }
            (None, None, None) => {}
            _ => return Err(Error::Contract("encoder gradients do not match the scheme".into())),
        }
        Ok(())
    }

    /// One learning step on a batch; returns the batch-mean loss.
    pub fn step(&mut self, x: ArrayView2<f32>, noise_seed: u64) -> Result<LossBreakdown> {
        let g = self.gradients(x, noise_seed)?;
        self.apply(&g)?;
        Ok(g.loss)
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.theta_opt.step_count()
    }
}

fn loss_sums(g: &Graph<'_>, recon: Var, kl: Var, total: Var) -> [f64; 3] {
    [g.scalar(recon) as f64, g.scalar(kl) as f64, g.scalar(total) as f64]
}

fn collect<P: Parameters + ?Sized>(grads: &Gradients, handles: &[Var], params: &P) -> Vec<Vec<f32>> {
    handles
        .iter()
        .zip(params.tensors())
        .map(|(h, t)| grads.get(*h).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        .collect()
}

fn load_grads<P: Parameters + ?Sized>(params: &mut P, grads: &[Vec<f32>]) -> Result<()> {
    let tensors = params.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} gradient buffers for {} tensors",
            grads.len(),
            tensors.len()
        )));
    }
    for (t, g) in tensors.into_iter().zip(grads) {
        t.zero_grad();
        t.accumulate_grad(g)?;
    }
    Ok(())
}

fn add_into(acc: &mut [Vec<f32>], v: &[Vec<f32>]) {
    for (a, b) in acc.iter_mut().zip(v) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

fn scale(acc: &mut [Vec<f32>], c: f32) {
    acc.iter_mut().flatten().for_each(|v| *v *= c);
}

/// Mean losses over one epoch, weighted by batch size.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_recon: f64,
    pub mean_kl: f64,
    pub optimizer_steps: usize,
}

/// Trains for `epochs` passes over `train`, calling `on_epoch` after each.
pub fn fit(
    learner: &mut Learner,
    train: &Dataset,
    epochs: usize,
    batch_size: usize,
    mut on_epoch: impl FnMut(&EpochStats, &Learner) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let shuffle = derive_seed(&[learner.cfg.seed, epoch as u64]);
        let batches = batch_indices(train.len(), batch_size, shuffle)?;
        let mut sums = [0.0f64; 3];
        for (b, idx) in batches.iter().enumerate() {
            let (x, _) = gather(train, idx);
            let noise_seed = derive_seed(&[tags::TRAIN_NOISE, learner.cfg.seed, epoch as u64, b as u64]);
            let l = learner.step(x.view(), noise_seed)?;
            let w = idx.len() as f64;
            sums[0] += l.total as f64 * w;
            sums[1] += l.reconstruction as f64 * w;
            sums[2] += l.kl_or_prior as f64 * w;
            log::debug!(
                "{} epoch {} batch {}/{}: loss {:.3}",
                learner.cfg.scheme,
                epoch + 1,
                b + 1,
                batches.len(),
                l.total
            );
        }
        let n = train.len().max(1) as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_total: sums[0] / n,
            mean_recon: sums[1] / n,
            mean_kl: sums[2] / n,
            optimizer_steps: batches.len(),
        };
        log::info!(
            "{} epoch {}/{}: loss {:.3} (recon {:.3}, kl {:.3})",
            learner.cfg.scheme,
            stats.epoch,
            epochs,
            stats.mean_total,
            stats.mean_recon,
            stats.mean_kl
        );
        on_epoch(&stats, learner)?;
        history.push(stats);
    }
    Ok(history)
}
