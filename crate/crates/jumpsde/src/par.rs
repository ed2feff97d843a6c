//! Data-parallel map with a sequential fallback.
//!
//! Built with the `parallel` feature (default) this dispatches to rayon;
//! without it the same call sites run sequentially. Output order always
//! matches input order, so results are bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `op` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indices<T, F>(n: usize, op: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    // a 1-thread pool would only add cross-thread handoff; run inline
    if rayon::current_num_threads() == 1 {
        return (0..n).map(op).collect();
    }
    (0..n).into_par_iter().map(op).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<T, F>(n: usize, op: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    (0..n).map(op).collect()
}

/// Map over a slice, preserving order.
#[cfg(feature = "parallel")]
pub fn map_slice<I, T, F>(items: &[I], op: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Send + Sync,
{
    if rayon::current_num_threads() == 1 {
        return items.iter().map(op).collect();
    }
    items.par_iter().map(op).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<I, T, F>(items: &[I], op: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Send + Sync,
{
    items.iter().map(op).collect()
}

/// Cap the global thread pool; `1` forces sequential execution even with
/// the `parallel` feature on. A no-op after the pool is already built.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let out = map_indices(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }
}
