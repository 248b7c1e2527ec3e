//! Per-particle map helpers with a rayon backend and a sequential fallback.
//!
//! Every helper preserves index order in its output, and no helper performs a
//! cross-particle reduction, so results are bit-identical whichever backend
//! runs them.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::Result;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential backend even when the `parallel` feature is enabled.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Cap the global worker pool. `0` keeps rayon's default. Only the first call
/// in a process has an effect.
pub fn init_threads(n: usize) {
    #[cfg(feature = "parallel")]
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible [`map_range`]; the first error in index order wins.
pub fn try_map_range<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}
