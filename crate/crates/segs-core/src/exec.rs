//! Execution helpers for the embarrassingly parallel bulk operations
//! (sampling chains, particle simulations, sweep rows).
//!
//! With the `parallel` feature (default) `map_indexed` fans out over the
//! rayon thread pool; without it, it degrades to the sequential loop.
//! `map_indexed_seq` is always sequential and is what the criterion bench
//! suite compares against.

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    map_indexed_seq(n, f)
}

/// Sequential counterpart of [`map_indexed`], kept available under every
/// feature combination.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    (0..n).map(f).collect()
}
