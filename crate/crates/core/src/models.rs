//! The shared Gaussian latent-variable model, its encoder, and the two
//! objectives trained on it: the predictive-coding loss and the β-weighted
//! negative ELBO.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, MlpParams, ParamHandles, Parameters, Tensor, Var};

/// Flattened 28×28 image.
pub const DATA_DIM: usize = 784;
pub const HIDDEN: [usize; 2] = [512, 256];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `p(z) = N(0, σ²_p I)`, `p(x|z) = N(μθ(z), σ²_x I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub decoder: MlpParams,
    pub sigma_x_sq: f32,
    pub prior_mu: Vec<f32>,
    pub prior_sigma_sq: f32,
}

impl GenerativeModel {
    /// Decoder `latent → 256 → 512 → 784` with tanh hidden units and a
    /// sigmoid output.
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, rng: &mut R) -> Self {
        let decoder = MlpParams::new(
            &[latent_dim, HIDDEN[1], HIDDEN[0], DATA_DIM],
            Activation::Tanh,
            Activation::Sigmoid,
            rng,
        );
        GenerativeModel {
            decoder,
            sigma_x_sq: 1.0,
            prior_mu: vec![0.0; latent_dim],
            prior_sigma_sq: 1.0,
        }
    }

    pub fn from_decoder(decoder: MlpParams) -> Result<Self> {
        let model = GenerativeModel {
            prior_mu: vec![0.0; decoder.in_dim()],
            decoder,
            sigma_x_sq: 1.0,
            prior_sigma_sq: 1.0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if !(self.sigma_x_sq > 0.0 && self.prior_sigma_sq > 0.0) {
            return Err(Error::Parameter(format!(
                "variances must be positive (σ²_x = {}, σ²_p = {})",
                self.sigma_x_sq, self.prior_sigma_sq
            )));
        }
        if self.prior_mu.len() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "prior mean of length {} for latent dim {}",
                self.prior_mu.len(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.in_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.decoder.out_dim()
    }

    /// `μθ(z)` for a batch of latents.
    pub fn decode(&self, z: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.decoder.predict(z)
    }
}

impl Parameters for GenerativeModel {
    fn tensors(&self) -> Vec<&Tensor> {
        self.decoder.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.decoder.tensors_mut()
    }
}

/// Amortized posterior `x ↦ (μφ(x), log σ²φ(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub net: MlpParams,
}

impl Encoder {
    /// `784 → 512 → 256 → 2·latent` with tanh hidden units and linear heads.
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, rng: &mut R) -> Self {
        Encoder {
            net: MlpParams::new(
                &[DATA_DIM, HIDDEN[0], HIDDEN[1], 2 * latent_dim],
                Activation::Tanh,
                Activation::Identity,
                rng,
            ),
        }
    }

    pub fn from_net(net: MlpParams) -> Result<Self> {
        net.validate()?;
        if net.out_dim() % 2 != 0 {
            return Err(Error::Dimension(format!(
                "encoder output width {} is odd",
                net.out_dim()
            )));
        }
        Ok(Encoder { net })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.out_dim() / 2
    }

    pub fn encode(&self, x: ArrayView2<f32>) -> Result<VariationalParams> {
        let out = self.net.predict(x)?;
        Ok(VariationalParams::from_heads(out.view(), self.latent_dim()))
    }

    /// Records the encoder on `g`, returning `(μ, log σ²)` nodes.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, Var, ParamHandles)> {
        let (out, handles) = self.net.forward(g, x, trainable)?;
        let d = self.latent_dim();
        let mu = g.slice_cols(out, 0, d)?;
        let log_var = g.slice_cols(out, d, 2 * d)?;
        Ok((mu, log_var, handles))
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<&Tensor> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.tensors_mut()
    }
}

/// Per-sample diagonal Gaussian posterior parameters `ψ = (μ, log σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl VariationalParams {
    /// `μ = 0`, `log σ² = 0`: the prior.
    pub fn standard(batch: usize, latent_dim: usize) -> Self {
        VariationalParams {
            mu: Tensor::zeros(&[batch, latent_dim]),
            log_var: Tensor::zeros(&[batch, latent_dim]),
        }
    }

    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() || mu.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "μ {:?} and log σ² {:?} must be matching matrices",
                mu.shape(),
                log_var.shape()
            )));
        }
        Ok(VariationalParams { mu, log_var })
    }

    /// Splits `[batch, 2d]` encoder output into the two heads.
    pub fn from_heads(out: ArrayView2<f32>, latent_dim: usize) -> Self {
        let mu = out.slice(ndarray::s![.., ..latent_dim]).to_owned();
        let lv = out.slice(ndarray::s![.., latent_dim..]).to_owned();
        VariationalParams {
            mu: Tensor::from_array(mu),
            log_var: Tensor::from_array(lv),
        }
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite() && self.log_var.is_finite()
    }

    /// Rows `range` of both heads.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Self {
        let d = self.latent_dim();
        let take = |t: &Tensor| {
            Tensor::new(&[range.len(), d], t.data()[range.start * d..range.end * d].to_vec())
                .expect("row slice")
        };
        VariationalParams {
            mu: take(&self.mu),
            log_var: take(&self.log_var),
        }
    }
}

impl Parameters for VariationalParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.mu, &self.log_var]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.mu, &mut self.log_var]
    }
}

/// Loss terms averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f32,
    pub kl_or_prior: f32,
    pub total: f32,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let (r, k, t) = items.iter().fold((0.0f64, 0.0f64, 0.0f64), |acc, l| {
            (
                acc.0 + l.reconstruction as f64,
                acc.1 + l.kl_or_prior as f64,
                acc.2 + l.total as f64,
            )
        });
        LossBreakdown {
            reconstruction: (r / n) as f32,
            kl_or_prior: (k / n) as f32,
            total: (t / n) as f32,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.kl_or_prior.is_finite() && self.total.is_finite()
    }
}

fn ensure_finite(l: LossBreakdown, what: &str) -> Result<LossBreakdown> {
    if l.is_finite() {
        Ok(l)
    } else {
        Err(Error::Numeric(format!("{what} is not finite: {l:?}")))
    }
}

/// `½ Σ_d (μ² + σ² − log σ² − 1)` per row.
pub fn kl_diag_gaussian_to_standard(psi: &VariationalParams) -> Result<Vec<f32>> {
    if !psi.is_finite() {
        return Err(Error::Numeric("posterior parameters are not finite".into()));
    }
    let d = psi.latent_dim();
    Ok(psi
        .mu
        .data()
        .chunks(d)
        .zip(psi.log_var.data().chunks(d))
        .map(|(m, lv)| {
            0.5 * m
                .iter()
                .zip(lv)
                .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
                .sum::<f32>()
        })
        .collect())
}

/// Standard normal draws in row-major order.
pub fn standard_normal<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// `z = μ + exp(½ log σ²) ⊙ ε` for externally supplied `ε`.
pub fn reparameterize_with(psi: &VariationalParams, eps: &[f32]) -> Result<Array2<f32>> {
    if eps.len() != psi.mu.len() {
        return Err(Error::Dimension(format!(
            "{} noise values for {} latents",
            eps.len(),
            psi.mu.len()
        )));
    }
    let z: Vec<f32> = psi
        .mu
        .data()
        .iter()
        .zip(psi.log_var.data())
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Array2::from_shape_vec((psi.batch(), psi.latent_dim()), z).expect("latent shape"))
}

/// `z = μ + exp(½ log σ²) ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<R: Rng + ?Sized>(psi: &VariationalParams, rng: &mut R) -> Array2<f32> {
    let eps = standard_normal(psi.mu.len(), rng);
    reparameterize_with(psi, &eps).expect("noise sized to ψ")
}

fn half_sq_rows(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Vec<f32> {
    a.axis_iter(Axis(0))
        .zip(b.axis_iter(Axis(0)))
        .map(|(ra, rb)| {
            0.5 * ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f32>()
        })
        .collect()
}

fn check_batch(x: ArrayView2<f32>, rows: usize, model: &GenerativeModel) -> Result<()> {
    if x.nrows() != rows || x.ncols() != model.data_dim() {
        return Err(Error::Dimension(format!(
            "images {:?} for {rows} latents of a {}-pixel model",
            x.shape(),
            model.data_dim()
        )));
    }
    Ok(())
}

/// Per-sample `β`-VAE loss with the reparameterization noise given
/// explicitly as `n_samples` blocks of `batch × latent` values.
pub fn vae_loss_per_sample_with(
    model: &GenerativeModel,
    x: ArrayView2<f32>,
    psi: &VariationalParams,
    beta: f32,
    eps_blocks: &[Vec<f32>],
) -> Result<Vec<LossBreakdown>> {
    if eps_blocks.is_empty() {
        return Err(Error::Parameter("vae loss needs at least one sample".into()));
    }
    check_batch(x, psi.batch(), model)?;
    let kl = kl_diag_gaussian_to_standard(psi)?;
    let mut recon = vec![0.0f32; psi.batch()];
    for eps in eps_blocks {
        let z = reparameterize_with(psi, eps)?;
        let xhat = model.decode(z.view())?;
        for (r, v) in recon.iter_mut().zip(half_sq_rows(x, xhat.view())) {
            *r += v / model.sigma_x_sq;
        }
    }
    let s = eps_blocks.len() as f32;
    recon
        .into_iter()
        .zip(kl)
        .map(|(r, k)| {
            let reconstruction = r / s;
            ensure_finite(
                LossBreakdown {
                    reconstruction,
                    kl_or_prior: k,
                    total: reconstruction + beta * k,
                },
                "vae loss",
            )
        })
        .collect()
}

/// Batch-mean `β`-VAE loss: reconstruction is the Monte Carlo mean of
/// `½‖x − μθ(z)‖² / σ²_x` over `n_samples` draws, plus `β·KL`.
pub fn vae_loss<R: Rng + ?Sized>(
    model: &GenerativeModel,
    x: ArrayView2<f32>,
    psi: &VariationalParams,
    beta: f32,
    n_samples: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let blocks: Vec<Vec<f32>> = (0..n_samples)
        .map(|_| standard_normal(psi.mu.len(), rng))
        .collect();
    Ok(LossBreakdown::mean(&vae_loss_per_sample_with(
        model, x, psi, beta, &blocks,
    )?))
}

/// Per-sample predictive-coding loss
/// `‖x − μθ(z)‖²/2σ²_x + ‖z − μ_p‖²/2σ²_p`.
pub fn pc_loss_per_sample(
    model: &GenerativeModel,
    x: ArrayView2<f32>,
    z: ArrayView2<f32>,
) -> Result<Vec<LossBreakdown>> {
    check_batch(x, z.nrows(), model)?;
    let xhat = model.decode(z)?;
    let recon = half_sq_rows(x, xhat.view());
    let prior_mu = ndarray::ArrayView1::from(&model.prior_mu);
    recon
        .into_iter()
        .zip(z.axis_iter(Axis(0)))
        .map(|(r, zr)| {
            let p = 0.5
                * zr.iter()
                    .zip(prior_mu.iter())
                    .map(|(a, m)| (a - m) * (a - m))
                    .sum::<f32>();
            let reconstruction = r / model.sigma_x_sq;
            let kl_or_prior = p / model.prior_sigma_sq;
            ensure_finite(
                LossBreakdown {
                    reconstruction,
                    kl_or_prior,
                    total: reconstruction + kl_or_prior,
                },
                "pc loss",
            )
        })
        .collect()
}

pub fn pc_loss(
    model: &GenerativeModel,
    x: ArrayView2<f32>,
    z: ArrayView2<f32>,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown::mean(&pc_loss_per_sample(model, x, z)?))
}

/// Loss nodes recorded on a graph. `total`, `reconstruction` and
/// `kl_or_prior` are sums over the batch.
pub struct GraphLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub kl_or_prior: Var,
    pub reconstruction_image: Var,
    pub decoder: ParamHandles,
}

impl GraphLoss {
    pub fn breakdown(&self, g: &Graph<'_>, batch: usize) -> LossBreakdown {
        let n = batch.max(1) as f32;
        LossBreakdown {
            reconstruction: g.scalar(self.reconstruction) / n,
            kl_or_prior: g.scalar(self.kl_or_prior) / n,
            total: g.scalar(self.total) / n,
        }
    }
}

/// Records the single-sample `β`-VAE loss for `(μ, log σ²)` nodes.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss_graph<'a>(
    g: &mut Graph<'a>,
    model: &'a GenerativeModel,
    train_decoder: bool,
    x: Var,
    mu: Var,
    log_var: Var,
    eps: &[f32],
    beta: f32,
) -> Result<GraphLoss> {
    let z = g.reparameterize(mu, log_var, eps)?;
    let (xhat, decoder) = model.decoder.forward(g, z, train_decoder)?;
    let sq = g.half_sq_dist(x, xhat)?;
    let reconstruction = g.scale(sq, 1.0 / model.sigma_x_sq);
    let kl_or_prior = g.kl_std_normal(mu, log_var)?;
    let total = g.lin_comb(&[(reconstruction, 1.0), (kl_or_prior, beta)])?;
    Ok(GraphLoss {
        total,
        reconstruction,
        kl_or_prior,
        reconstruction_image: xhat,
        decoder,
    })
}

/// Records the predictive-coding loss for a latent node `z`.
pub fn pc_loss_graph<'a>(
    g: &mut Graph<'a>,
    model: &'a GenerativeModel,
    train_decoder: bool,
    x: Var,
    z: Var,
) -> Result<GraphLoss> {
    let (xhat, decoder) = model.decoder.forward(g, z, train_decoder)?;
    let sq = g.half_sq_dist(x, xhat)?;
    let reconstruction = g.scale(sq, 1.0 / model.sigma_x_sq);
    let rows = g.shape(z)[0];
    let mu_p: Vec<f32> = (0..rows).flat_map(|_| model.prior_mu.iter().copied()).collect();
    let mu_p = g.constant(g.shape(z).to_vec().as_slice(), mu_p)?;
    let prior_sq = g.half_sq_dist(z, mu_p)?;
    let kl_or_prior = g.scale(prior_sq, 1.0 / model.prior_sigma_sq);
    let total = g.add(reconstruction, kl_or_prior)?;
    Ok(GraphLoss {
        total,
        reconstruction,
        kl_or_prior,
        reconstruction_image: xhat,
        decoder,
    })
}

/// `log N(v; mean, diag(var))` with all constants.
pub fn log_normal_diag(v: &[f32], mean: &[f32], var: &[f32]) -> f64 {
    v.iter()
        .zip(mean)
        .zip(var)
        .map(|((&v, &m), &s)| {
            let (v, m, s) = (v as f64, m as f64, s as f64);
            -0.5 * (LN_2PI + s.ln() + (v - m) * (v - m) / s)
        })
        .sum()
}

/// Per-sample ELBO as `E_q[log p(x|z)] − E_q[log q(z) − log p(z)]`, with the
/// expectations replaced by averages over the supplied latent draws
/// (`draws[s]` is a `batch × latent` block).
pub fn elbo_likelihood_form(
    model: &GenerativeModel,
    x: ArrayView2<f32>,
    psi: &VariationalParams,
    draws: &[Array2<f32>],
) -> Result<Vec<f64>> {
    let (b, d) = (psi.batch(), psi.latent_dim());
    check_batch(x, b, model)?;
    let var_x = vec![model.sigma_x_sq; model.data_dim()];
    let var_p = vec![model.prior_sigma_sq; d];
    let mut out = vec![0.0f64; b];
    for z in draws {
        let xhat = model.decode(z.view())?;
        for i in 0..b {
            let zi = z.row(i).to_vec();
            let q_var: Vec<f32> = psi.log_var.data()[i * d..(i + 1) * d]
                .iter()
                .map(|lv| lv.exp())
                .collect();
            let loglik = log_normal_diag(
                x.row(i).as_slice().expect("row"),
                xhat.row(i).as_slice().expect("row"),
                &var_x,
            );
            let log_q = log_normal_diag(&zi, &psi.mu.data()[i * d..(i + 1) * d], &q_var);
            let log_p = log_normal_diag(&zi, &model.prior_mu, &var_p);
            out[i] += loglik - (log_q - log_p);
        }
    }
    let s = draws.len() as f64;
    Ok(out.into_iter().map(|v| v / s).collect())
}

/// Per-sample ELBO as `E_q[log p(x, z)] − E_q[log q(z)]`, where the joint is
/// evaluated as one Gaussian over the concatenated vector `(x, z)`.
pub fn elbo_joint_form(
    model: &GenerativeModel,
    x: ArrayView2<f32>,
    psi: &VariationalParams,
    draws: &[Array2<f32>],
) -> Result<Vec<f64>> {
    let (b, d) = (psi.batch(), psi.latent_dim());
    check_batch(x, b, model)?;
    let n = model.data_dim();
    let mut joint_var = vec![model.sigma_x_sq; n];
    joint_var.extend(std::iter::repeat_n(model.prior_sigma_sq, d));
    let mut out = vec![0.0f64; b];
    for z in draws {
        let xhat = model.decode(z.view())?;
        for i in 0..b {
            let mut v = x.row(i).to_vec();
            v.extend(z.row(i).iter());
            let mut mean = xhat.row(i).to_vec();
            mean.extend(&model.prior_mu);
            let log_joint = log_normal_diag(&v, &mean, &joint_var);
            let q_var: Vec<f32> = psi.log_var.data()[i * d..(i + 1) * d]
                .iter()
                .map(|lv| lv.exp())
                .collect();
            let log_q = log_normal_diag(&v[n..], &psi.mu.data()[i * d..(i + 1) * d], &q_var);
            out[i] += log_joint - log_q;
        }
    }
    let s = draws.len() as f64;
    Ok(out.into_iter().map(|v| v / s).collect())
}

/// ELBO under a point-mass posterior at `z`: `log p(x|z) + log p(z)` with
/// every Gaussian constant kept.
pub fn delta_elbo(model: &GenerativeModel, x: ArrayView2<f32>, z: ArrayView2<f32>) -> Result<Vec<f64>> {
    check_batch(x, z.nrows(), model)?;
    let xhat = model.decode(z)?;
    let var_x = vec![model.sigma_x_sq; model.data_dim()];
    let var_p = vec![model.prior_sigma_sq; model.latent_dim()];
    Ok((0..z.nrows())
        .map(|i| {
            log_normal_diag(
                x.row(i).as_slice().expect("row"),
                xhat.row(i).as_slice().expect("row"),
                &var_x,
            ) + log_normal_diag(&z.row(i).to_vec(), &model.prior_mu, &var_p)
        })
        .collect())
}
