//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon; without it they are
//! plain loops. Reductions always combine fixed-size chunks in index order,
//! so floating-point results do not depend on the number of threads.

use crate::Result;

/// Chunk size used by deterministic reductions.
pub const REDUCE_CHUNK: usize = 256;

/// `(0..n).map(f).collect()` preserving order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fallible [`map_range`]; the error reported is the one with the smallest index.
pub fn try_map_range<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

/// Calls `f(i, chunk_i)` for consecutive chunks of `chunk` elements.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Fallible [`for_each_chunk_mut`]; returns the lowest-index error.
pub fn try_for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F) -> Result<()>
where
    T: Send,
    F: Fn(usize, &mut [T]) -> Result<()> + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<()>> = {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<()>> = data
        .chunks_mut(chunk)
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect();
    results.into_iter().collect()
}

/// Deterministic vector-valued sum over `0..n`.
///
/// `f(i, acc)` adds the contribution of item `i` into `acc` (length `width`).
/// Items are grouped in chunks of [`REDUCE_CHUNK`]; chunk partials are added
/// in order.
pub fn sum_vec<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_range(n_chunks, |c| {
        let mut acc = vec![0.0; width];
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        for i in lo..hi {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Number of worker threads in use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
