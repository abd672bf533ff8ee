//! Job-level data parallelism with a sequential fallback.
//!
//! Independent jobs (one coupled run per (seed, perturbation) pair, one
//! matrix per contraction check) are mapped in input order and collected
//! into a `Vec`, so results are bit-identical whether the `parallel` feature
//! is enabled, disabled, or run on any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `jobs`, preserving order. Parallel when the `parallel`
/// feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_jobs<T, U, F>(jobs: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    jobs.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_jobs<T, U, F>(jobs: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    jobs.into_iter().map(f).collect()
}

/// Sequential mapping, always available. The criterion bench compares this
/// against `map_jobs` on the same workload.
pub fn map_jobs_sequential<T, U, F>(jobs: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    jobs.into_iter().map(f).collect()
}

/// Bound the worker pool (CLI `--threads`). No-op without the feature.
#[cfg(feature = "parallel")]
pub fn set_threads(n: usize) {
    // Ignore the error if a global pool already exists; thread count never
    // affects results, only wall time.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

#[cfg(not(feature = "parallel"))]
pub fn set_threads(_n: usize) {}
