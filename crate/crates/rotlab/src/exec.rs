//! Data-parallel map helpers.
//!
//! `par_map` uses rayon when the `parallel` feature is enabled and falls back
//! to a plain sequential loop otherwise. Callers must only submit work whose
//! result is independent of scheduling order; results come back in input
//! order, so deterministic reductions stay deterministic under both builds.
//!
//! The `ROTLAB_THREADS` environment variable caps the rayon worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
use std::sync::Once;

#[cfg(feature = "parallel")]
static THREAD_INIT: Once = Once::new();

/// Installs a global rayon pool honoring `ROTLAB_THREADS`, once.
/// Without the env var (or without the `parallel` feature) this is a no-op.
pub fn init_threads() {
    #[cfg(feature = "parallel")]
    THREAD_INIT.call_once(|| {
        if let Ok(v) = std::env::var("ROTLAB_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n > 0 {
                    // Ignore failure: a pool may already be installed.
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

/// Maps `f` over `0..n`, in parallel when available. Output order is `0..n`.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        init_threads();
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference path, always available. Benches compare this against
/// `par_map`.
pub fn seq_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice with the element index, preserving order.
pub fn par_map_slice_indexed<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(usize, &'a S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        init_threads();
        items.par_iter().enumerate().map(|(i, s)| f(i, s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, s)| f(i, s)).collect()
    }
}

/// Maps `f` over a slice, preserving order.
pub fn par_map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        init_threads();
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let v = par_map(100, |i| i * i);
        assert_eq!(v, seq_map(100, |i| i * i));
    }
}
