//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, work is split across rayon over *disjoint
//! output slices*; every element is still computed by the same expression in
//! the same order, so parallel and sequential runs are bitwise identical.
//! `set_sequential(true)` forces serial execution at runtime (the CLI's
//! `--deterministic` flag), and building without the feature removes rayon
//! entirely.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force serial execution even when the `parallel` feature is enabled.
pub fn set_sequential(sequential: bool) {
    SEQUENTIAL.store(sequential, Ordering::SeqCst);
}

/// True when work must run on the current thread only.
pub fn is_sequential() -> bool {
    cfg!(not(feature = "parallel")) || SEQUENTIAL.load(Ordering::SeqCst)
}

/// Apply `f` to consecutive chunks of `data`. `f` receives the chunk index
/// and the chunk.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Apply `f(i, &mut out[i])` over an output vector of independent cells.
pub fn for_each_indexed_mut<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        data.par_iter_mut().enumerate().for_each(|(i, v)| f(i, v));
        return;
    }
    for (i, v) in data.iter_mut().enumerate() {
        f(i, v);
    }
}

/// Map `f` over indices `0..n`, collecting results in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let mut a: Vec<f64> = (0..1000).map(|i| i as f64 * 0.37).collect();
        let mut b = a.clone();
        let work = |i: usize, c: &mut [f64]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (*v).sin() * (i * 31 + j) as f64;
            }
        };
        set_sequential(true);
        for_each_chunk_mut(&mut a, 7, work);
        set_sequential(false);
        for_each_chunk_mut(&mut b, 7, work);
        assert_eq!(a, b);
    }
}
