use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_rows, CorruptionSpec};
use crate::error::{Error, Result};
use crate::models::{standard_normal, vae_loss_per_sample_with, Encoder, GenerativeModel, VariationalParams};
use crate::numerics::Tensor;
use crate::par::{map_chunks, Exec};
use crate::rng::{derive_seed, stream_rng, tags};

const GRID_CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub lo: f32,
    pub hi: f32,
    pub resolution: usize,
    /// Posterior variance shared by every grid node.
    pub sigma_sq: f32,
    /// Reparameterization draws per node, shared across nodes.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lo: -3.0,
            hi: 3.0,
            resolution: 100,
            sigma_sq: 0.01,
            samples: 4,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn coordinate(&self, i: usize) -> f32 {
        if self.resolution < 2 {
            return 0.5 * (self.lo + self.hi);
        }
        self.lo + (self.hi - self.lo) * i as f32 / (self.resolution - 1) as f32
    }

    fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.samples == 0 || !(self.hi > self.lo) || !(self.sigma_sq > 0.0) {
            return Err(Error::Parameter(format!("bad landscape grid {self:?}")));
        }
        Ok(())
    }
}

/// Loss surface over `(μ₁, μ₂)`; `values[[i, j]]` sits at
/// `(coordinate(i), coordinate(j))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub values: Array2<f32>,
    pub argmin: [f32; 2],
    /// Amortized posterior mean, when an encoder is available.
    pub init: Option<[f32; 2]>,
}

impl Surface {
    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub grid: GridConfig,
    pub image: Vec<f32>,
    pub corrupted_image: Vec<f32>,
    pub spec: CorruptionSpec,
    pub clean: Surface,
    pub corrupted: Surface,
}

/// β = 1 loss of `x` at every grid node.
pub fn loss_surface(
    model: &GenerativeModel,
    encoder: Option<&Encoder>,
    x: &[f32],
    grid: &GridConfig,
    exec: Exec,
) -> Result<Surface> {
    grid.validate()?;
    if model.latent_dim() != 2 {
        return Err(Error::Contract(format!(
            "landscapes need a 2-latent model, got {}",
            model.latent_dim()
        )));
    }
    if x.len() != model.data_dim() {
        return Err(Error::Dimension(format!("{}-pixel image", x.len())));
    }
    let r = grid.resolution;
    let mut rng = stream_rng(derive_seed(&[tags::LANDSCAPE, grid.seed]), 0);
    let eps: Vec<[f32; 2]> = (0..grid.samples)
        .map(|_| {
            let e = standard_normal(2, &mut rng);
            [e[0], e[1]]
        })
        .collect();
    let log_var = grid.sigma_sq.ln();
    let parts = map_chunks(exec, r * r, GRID_CHUNK, |range| {
        let b = range.len();
        let mu: Vec<f32> = range
            .clone()
            .flat_map(|k| [grid.coordinate(k / r), grid.coordinate(k % r)])
            .collect();
        let psi = VariationalParams::new(Tensor::new(&[b, 2], mu)?, Tensor::filled(&[b, 2], log_var))?;
        let xs = Array2::from_shape_fn((b, x.len()), |(_, j)| x[j]);
        let blocks: Vec<Vec<f32>> = eps.iter().map(|e| e.repeat(b)).collect();
        let losses = vae_loss_per_sample_with(model, xs.view(), &psi, 1.0, &blocks)?;
        Ok(losses.into_iter().map(|l| l.total).collect::<Vec<f32>>())
    })?;
    let values = Array2::from_shape_vec((r, r), parts.concat()).expect("grid shape");
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("landscape loss".into()));
    }
    let (mut best, mut at) = (f32::INFINITY, (0, 0));
    for ((i, j), &v) in values.indexed_iter() {
        if v < best {
            best = v;
            at = (i, j);
        }
    }
    let init = match encoder {
        Some(enc) => {
            let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
            let psi = enc.encode(xv)?;
            Some([psi.mu.data()[0], psi.mu.data()[1]])
        }
        None => None,
    };
    Ok(Surface {
        values,
        argmin: [grid.coordinate(at.0), grid.coordinate(at.1)],
        init,
    })
}

/// Surfaces for test image `x` (sample `id`) and for its corrupted version.
pub fn elbo_landscape(
    model: &GenerativeModel,
    encoder: Option<&Encoder>,
    x: &[f32],
    id: u64,
    spec: &CorruptionSpec,
    grid: &GridConfig,
    exec: Exec,
) -> Result<LandscapeGrid> {
    let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Dimension(e.to_string()))?;
    let corrupted = corrupt_rows(xv, spec, id)?.into_raw_vec_and_offset().0;
    Ok(LandscapeGrid {
        grid: *grid,
        image: x.to_vec(),
        clean: loss_surface(model, encoder, x, grid, exec)?,
        corrupted: loss_surface(model, encoder, &corrupted, grid, exec)?,
        corrupted_image: corrupted,
        spec: *spec,
    })
}

pub fn distance(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
