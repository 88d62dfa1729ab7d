use crate::models::standard_normal;
use crate::rng::stream_rng;

/// Reparameterization noise `ε_k` for steps `k = 0..steps`, drawn per sample
/// from that sample's own stream. Step `k` of sample `i` is the same no
/// matter how samples are grouped into batches.
pub struct NoiseTable {
    latent_dim: usize,
    steps: usize,
    rows: Vec<Vec<f32>>,
}

impl NoiseTable {
    pub fn new(seed: u64, ids: &[u64], steps: usize, latent_dim: usize) -> Self {
        let rows = ids
            .iter()
            .map(|&id| standard_normal(steps * latent_dim, &mut stream_rng(seed, id)))
            .collect();
        NoiseTable {
            latent_dim,
            steps,
            rows,
        }
    }

    /// `batch × latent` block for step `k`.
    pub fn step(&self, k: usize) -> Vec<f32> {
        assert!(k < self.steps, "noise step {k} beyond table of {}", self.steps);
        let d = self.latent_dim;
        self.rows
            .iter()
            .flat_map(|r| r[k * d..(k + 1) * d].iter().copied())
            .collect()
    }
}
