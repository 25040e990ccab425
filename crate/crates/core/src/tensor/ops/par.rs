//! Per-sample fan-out. Runs on the rayon pool with the `parallel` feature,
//! sequentially otherwise; results come back in sample order either way.

use alloc::vec::Vec;

#[cfg(feature = "parallel")]
pub(crate) fn map_samples<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if n <= 1 {
        return (0..n).map(f).collect();
    }
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_samples<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}
