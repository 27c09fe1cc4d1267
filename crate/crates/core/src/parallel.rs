//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the work items run on the
//! rayon pool; without it the same closure runs in a plain loop. Both paths
//! preserve input order, so callers that reduce results in order are
//! bit-identical across the two builds.

/// Order-preserving map over an index range.
#[cfg(feature = "parallel")]
pub(crate) fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
