//! Data-parallel helpers used inside tensor kernels.
//!
//! With the `parallel` feature, work over independent chunks runs on the rayon
//! pool; otherwise (or after `set_parallel(false)`) it runs sequentially. Both
//! paths produce bit-identical results: callers only parallelize over disjoint
//! outputs and reduce partial results in a fixed order.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Toggles the parallel path at runtime (no effect without the `parallel` feature).
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Calls `f(index, chunk)` for every `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluates `f` on `0..n`, returning results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
