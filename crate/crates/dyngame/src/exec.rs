//! Per-robot execution helper.
//!
//! Within a communication round every robot's local computation is
//! independent; the fabric exchange is the only synchronization point.
//! Results are collected in robot-index order, so parallel and sequential
//! execution produce bit-identical output.

#[cfg(feature = "parallel")]
pub(crate) fn map_robots<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_robots<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
