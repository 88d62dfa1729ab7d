//! Independent oracles shared by the math-core tests and the acceptance run.
//! Each returns the measured discrepancy so callers choose how to report it.
#![allow(dead_code)]

use iverlab::data::{corrupt, corrupt_rows, gaussian_blur, CorruptionSpec, NoiseKind};
use iverlab::models::{
    delta_elbo, elbo_joint_form, elbo_likelihood_form, kl_diag_gaussian_to_standard, pc_loss_graph,
    pc_loss_per_sample, reparameterize, reparameterize_with, standard_normal, vae_loss_graph, Encoder,
    GenerativeModel, VariationalParams,
};
use iverlab::numerics::{Activation, Graph, MlpParams, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-5;

/// Plain f64 network: `layers[i] = (weights [in][out], bias [out])`.
#[derive(Clone)]
pub struct Net64 {
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    hidden: fn(f64) -> f64,
    output: fn(f64) -> f64,
}

pub fn ident(v: f64) -> f64 {
    v
}
pub fn tanh(v: f64) -> f64 {
    v.tanh()
}
pub fn sigm(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

impl Net64 {
    pub fn from(p: &MlpParams, hidden: fn(f64) -> f64, output: fn(f64) -> f64) -> Self {
        let layers = p
            .layers
            .iter()
            .map(|l| {
                let (i, o) = (l.in_dim(), l.out_dim());
                let w = (0..i)
                    .map(|r| (0..o).map(|c| l.weight.data()[r * o + c] as f64).collect())
                    .collect();
                (w, l.bias.data().iter().map(|&v| v as f64).collect())
            })
            .collect();
        Net64 {
            layers,
            hidden,
            output,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let act = if li == last { self.output } else { self.hidden };
            h = (0..b.len())
                .map(|c| act(b[c] + h.iter().enumerate().map(|(r, v)| v * w[r][c]).sum::<f64>()))
                .collect();
        }
        h
    }

    /// Flat coordinate `k` in `[w0, b0, w1, b1, ...]` order.
    pub fn coord(&mut self, mut k: usize) -> &mut f64 {
        for (w, b) in &mut self.layers {
            let (i, o) = (w.len(), b.len());
            if k < i * o {
                return &mut w[k / o][k % o];
            }
            k -= i * o;
            if k < o {
                return &mut b[k];
            }
            k -= o;
        }
        panic!("coordinate out of range")
    }

    /// Central difference of `f` along coordinate `k`.
    pub fn central_difference(&self, k: usize, f: impl Fn(&Net64) -> f64) -> f64 {
        let (mut up, mut dn) = (self.clone(), self.clone());
        *up.coord(k) += H;
        *dn.coord(k) -= H;
        (f(&up) - f(&dn)) / (2.0 * H)
    }
}

pub fn flat(grads: &[Vec<f32>]) -> Vec<f64> {
    grads.iter().flatten().map(|&v| v as f64).collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(FLOOR)
}

pub fn random_matrix(rows: usize, cols: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn small_decoder(rng: &mut ChaCha8Rng) -> GenerativeModel {
    GenerativeModel::from_decoder(MlpParams::new(&[3, 8, 7, 12], Activation::Tanh, Activation::Sigmoid, rng)).unwrap()
}

pub fn sample_coords(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

fn pc_loss64(net: &Net64, x: &Array2<f32>, z: &Array2<f32>) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let zi: Vec<f64> = z.row(i).iter().map(|&v| v as f64).collect();
            let xhat = net.forward(&zi);
            let r: f64 = x.row(i).iter().zip(&xhat).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
            0.5 * r + 0.5 * zi.iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

/// Largest relative error between the PC-loss gradient (decoder and latent)
/// and 64-bit central differences, labelled by coordinate.
pub fn pc_gradient_error(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_decoder(&mut rng);
    let x = random_matrix(4, 12, 0.0, 1.0, &mut rng);
    let z = random_matrix(4, 3, -1.5, 1.5, &mut rng);
    let zt = Tensor::from_array(z.clone());
    let xt = Tensor::from_array(x.clone());

    let mut g = Graph::new();
    let xv = g.constant_ref(&xt);
    let zv = g.param(&zt);
    let gl = pc_loss_graph(&mut g, &model, true, xv, zv).unwrap();
    let mut grads = g.backward(gl.total).unwrap();
    let theta: Vec<Vec<f32>> = gl.decoder.0.iter().map(|h| grads.take(*h).unwrap()).collect();
    let dz = grads.take(zv).unwrap();

    let base = Net64::from(&model.decoder, tanh, sigm);
    let theta = flat(&theta);
    let mut worst = (0.0, String::new());
    let mut note = |e: f64, what: String| {
        if e > worst.0 {
            worst = (e, what);
        }
    };
    for k in sample_coords(theta.len(), 30, &mut rng) {
        let fd = base.central_difference(k, |n| pc_loss64(n, &x, &z));
        note(rel_err(theta[k], fd), format!("θ[{k}]"));
    }
    for k in 0..dz.len() {
        let (mut zu, mut zd) = (z.clone(), z.clone());
        zu.as_slice_mut().unwrap()[k] += H as f32;
        zd.as_slice_mut().unwrap()[k] -= H as f32;
        let h = (zu.as_slice().unwrap()[k] as f64 - zd.as_slice().unwrap()[k] as f64) / 2.0;
        let fd = (pc_loss64(&base, &x, &zu) - pc_loss64(&base, &x, &zd)) / (2.0 * h);
        note(rel_err(dz[k] as f64, fd), format!("z[{k}]"));
    }
    worst
}

/// Single-sample β-VAE loss with fixed noise, in f64.
fn vae_loss64(enc: &Net64, dec: &Net64, x: &Array2<f32>, eps: &[f32], beta: f64) -> f64 {
    let d = eps.len() / x.nrows();
    (0..x.nrows())
        .map(|i| {
            let xi: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
            let out = enc.forward(&xi);
            let (mu, lv) = out.split_at(d);
            let z: Vec<f64> = (0..d)
                .map(|j| mu[j] + (0.5 * lv[j]).exp() * eps[i * d + j] as f64)
                .collect();
            let xhat = dec.forward(&z);
            let r: f64 = xi.iter().zip(&xhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * 0.5;
            let kl: f64 = 0.5 * (0..d).map(|j| mu[j] * mu[j] + lv[j].exp() - lv[j] - 1.0).sum::<f64>();
            r + beta * kl
        })
        .sum()
}

/// As [`pc_gradient_error`] for the β-VAE loss over encoder and decoder.
pub fn vae_gradient_error(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_decoder(&mut rng);
    let enc = Encoder::from_net(MlpParams::new(&[12, 9, 6], Activation::Tanh, Activation::Identity, &mut rng)).unwrap();
    let x = random_matrix(3, 12, 0.0, 1.0, &mut rng);
    let eps: Vec<f32> = (0..9).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let beta = 1.5;
    let xt = Tensor::from_array(x.clone());

    let mut g = Graph::new();
    let xv = g.constant_ref(&xt);
    let (mu, lv, enc_h) = enc.forward(&mut g, xv, true).unwrap();
    let gl = vae_loss_graph(&mut g, &model, true, xv, mu, lv, &eps, beta as f32).unwrap();
    let grads = g.backward(gl.total).unwrap();
    let phi = flat(&enc_h.0.iter().map(|h| grads.get(*h).unwrap().to_vec()).collect::<Vec<_>>());
    let theta = flat(&gl.decoder.0.iter().map(|h| grads.get(*h).unwrap().to_vec()).collect::<Vec<_>>());

    let e64 = Net64::from(&enc.net, tanh, ident);
    let d64 = Net64::from(&model.decoder, tanh, sigm);
    let mut worst = (0.0, String::new());
    for k in sample_coords(phi.len(), 25, &mut rng) {
        let fd = e64.central_difference(k, |n| vae_loss64(n, &d64, &x, &eps, beta));
        let e = rel_err(phi[k], fd);
        if e > worst.0 {
            worst = (e, format!("φ[{k}]"));
        }
    }
    for k in sample_coords(theta.len(), 25, &mut rng) {
        let fd = d64.central_difference(k, |n| vae_loss64(&e64, n, &x, &eps, beta));
        let e = rel_err(theta[k], fd);
        if e > worst.0 {
            worst = (e, format!("θ[{k}]"));
        }
    }
    worst
}

pub fn psi(mu: Vec<f32>, log_var: Vec<f32>, batch: usize) -> VariationalParams {
    let d = mu.len() / batch;
    VariationalParams::new(
        Tensor::new(&[batch, d], mu).unwrap(),
        Tensor::new(&[batch, d], log_var).unwrap(),
    )
    .unwrap()
}

/// `|closed form − Monte Carlo|` for KL(N(1, 1) ‖ N(0, 1)) over `n` draws,
/// using `KL = E_q[(z² − (z − 1)²)/2]`.
pub fn kl_monte_carlo_gap(n: usize, seed: u64) -> f64 {
    let p = psi(vec![1.0], vec![0.0], 1);
    let closed = kl_diag_gaussian_to_standard(&p).unwrap()[0] as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mc: f64 = (0..n)
        .map(|_| {
            let z = reparameterize(&p, &mut rng)[[0, 0]] as f64;
            0.5 * (z * z - (z - 1.0) * (z - 1.0))
        })
        .sum::<f64>()
        / n as f64;
    (mc - closed).abs()
}

fn small_model(latent: usize, data: usize, seed: u64) -> GenerativeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GenerativeModel::from_decoder(MlpParams::new(
        &[latent, 6, data],
        Activation::Tanh,
        Activation::Sigmoid,
        &mut rng,
    ))
    .unwrap()
}

/// Random model, batch, posterior and shared noise blocks.
pub fn instance(
    seed: u64,
    batch: usize,
    latent: usize,
    data: usize,
    samples: usize,
) -> (GenerativeModel, Array2<f32>, VariationalParams, Vec<Vec<f32>>) {
    let model = small_model(latent, data, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = Array2::from_shape_fn((batch, data), |_| rng.random::<f32>());
    let p = psi(
        (0..batch * latent).map(|_| rng.random_range(-1.5f32..1.5)).collect(),
        (0..batch * latent).map(|_| rng.random_range(-2.0f32..1.0)).collect(),
        batch,
    );
    let eps = (0..samples).map(|_| standard_normal(batch * latent, &mut rng)).collect();
    (model, x, p, eps)
}

/// Largest per-sample gap between the likelihood-minus-KL ELBO and the
/// joint-minus-entropy ELBO on shared draws, over several random instances.
pub fn elbo_form_gap(instances: u64) -> f64 {
    (0..instances)
        .flat_map(|seed| {
            let (model, x, p, eps) = instance(seed, 4, 3, 7, 8);
            let draws: Vec<Array2<f32>> = eps.iter().map(|e| reparameterize_with(&p, e).unwrap()).collect();
            let a = elbo_likelihood_form(&model, x.view(), &p, &draws).unwrap();
            let b = elbo_joint_form(&model, x.view(), &p, &draws).unwrap();
            a.into_iter().zip(b).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Largest `|Δ delta-ELBO + Δ pc_loss|` over random pairs of `(x, z)`.
pub fn delta_offset_gap(pairs: u64) -> f64 {
    (0..pairs)
        .map(|seed| {
            let model = small_model(4, 9, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let x = Array2::from_shape_fn((2, 9), |_| rng.random::<f32>());
            let z = Array2::from_shape_fn((2, 4), |_| rng.random_range(-2.0f32..2.0));
            let elbo = delta_elbo(&model, x.view(), z.view()).unwrap();
            let pc = pc_loss_per_sample(&model, x.view(), z.view()).unwrap();
            ((elbo[0] - elbo[1]) + (pc[0].total as f64 - pc[1].total as f64)).abs()
        })
        .fold(0.0, f64::max)
}

/// Range, shape, determinism, blur linearity and salt & pepper rate of the
/// corruption operator. Returns the first violated property.
pub fn corruption_properties(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((8, 784), |_| rng.random::<f32>());
    for kind in NoiseKind::CORRUPTIONS {
        for level in 1..=4 {
            let spec = CorruptionSpec::canonical(kind, level, seed).map_err(|e| e.to_string())?;
            let y = corrupt(x.view(), &spec).map_err(|e| e.to_string())?;
            if y.dim() != x.dim() || y.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("{} level {level} leaves [0,1] or changes shape", kind.tag()));
            }
            if y != corrupt(x.view(), &spec).map_err(|e| e.to_string())? {
                return Err(format!("{} level {level} is not deterministic", kind.tag()));
            }
        }
    }
    let w = |s| corrupt(x.view(), &CorruptionSpec::new(NoiseKind::WhiteNoise, 0.4, s)).unwrap();
    if w(seed) == w(seed + 1) {
        return Err("white noise ignores its seed".into());
    }
    let (a, b) = (0.7f32, -1.3f32);
    let (u, v) = (x.row(0).to_vec(), x.row(1).to_vec());
    let mix: Vec<f32> = u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect();
    for sigma in [1.0, 2.0, 3.0, 4.0] {
        let (l, bu, bv) = (
            gaussian_blur(&mix, 28, 28, sigma),
            gaussian_blur(&u, 28, 28, sigma),
            gaussian_blur(&v, 28, 28, sigma),
        );
        let err = (0..784).map(|i| (l[i] - (a * bu[i] + b * bv[i])).abs()).fold(0.0, f32::max);
        if err >= 1e-5 {
            return Err(format!("blur σ={sigma} is not linear (err {err:e})"));
        }
    }
    let half = Array2::from_elem((16, 784), 0.5f32);
    for p in [0.1f32, 0.2, 0.3, 0.4, 1.0] {
        let y = corrupt_rows(half.view(), &CorruptionSpec::new(NoiseKind::SaltPepper, p, seed), 0).unwrap();
        let rate = y.iter().filter(|&&v| v != 0.5).count() as f32 / y.len() as f32;
        if (rate - p).abs() >= 0.02 {
            return Err(format!("salt & pepper rate {rate} for p = {p}"));
        }
        if p == 1.0 {
            let ones = y.iter().filter(|&&v| v == 1.0).count() as f32 / y.len() as f32;
            if (ones - 0.5).abs() >= 0.02 {
                return Err(format!("salt & pepper p = 1 gives {ones} ones"));
            }
        }
    }
    Ok(())
}
