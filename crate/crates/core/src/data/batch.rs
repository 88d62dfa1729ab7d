use ndarray::Array2;
use rand::seq::SliceRandom;

use super::idx::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, tags};

/// Index lists of one epoch: a seeded permutation cut into `batch_size`
/// pieces, the final partial piece included.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(derive_seed(&[tags::SHUFFLE, shuffle_seed]), 0);
    perm.shuffle(&mut rng);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Copies the rows `idx` of a dataset.
pub fn gather(ds: &Dataset, idx: &[usize]) -> (Array2<f32>, Vec<u8>) {
    let images = ds.images.select(ndarray::Axis(0), idx);
    let labels = idx.iter().map(|&i| ds.labels[i]).collect();
    (images, labels)
}

/// Materialized batches of `(images, labels)` for one epoch.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<impl Iterator<Item = (Array2<f32>, Vec<u8>)> + '_> {
    let idx = batch_indices(ds.len(), batch_size, shuffle_seed)?;
    Ok(idx.into_iter().map(move |b| gather(ds, &b)))
}
