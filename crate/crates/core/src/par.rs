//! Data-parallel execution over independent chunks of work.
//!
//! Evaluation work (inference over test samples, classifier batches, grid
//! probes) is split into fixed-size chunks whose layout never depends on the
//! number of worker threads. Results are merged back in chunk order, so the
//! parallel and sequential paths produce bit-identical output.
//!
//! With the `parallel` feature disabled, [`Exec::Parallel`] silently runs the
//! sequential path.

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Splits `0..len` into consecutive ranges of at most `chunk` items.
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..len)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(len))
        .collect()
}

/// Applies `f` to every chunk of `0..len` and returns the results in chunk
/// order. The first error (in chunk order) wins.
pub fn map_chunks<T, F>(exec: Exec, len: usize, chunk: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> Result<T> + Sync + Send,
{
    let ranges = chunk_ranges(len, chunk);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return ranges.into_par_iter().map(&f).collect();
    }
    let _ = exec;
    ranges.into_iter().map(f).collect()
}

/// Configures the global worker pool. Only the first call has an effect.
pub fn init_workers(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n.max(1));
        }
        let _ = builder.build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
