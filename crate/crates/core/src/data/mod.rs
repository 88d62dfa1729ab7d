//! MNIST loading, batching and the three image corruptions.

mod batch;
mod corrupt;
mod idx;

pub use batch::{batch_indices, batches, gather};
pub use corrupt::{
    corrupt, corrupt_rows, gaussian_blur, gaussian_kernel, CorruptionSpec, NoiseKind, IMAGE_SIDE,
};
pub use idx::{load_mnist, load_split, read_idx_images, read_idx_labels, Dataset, Split};
