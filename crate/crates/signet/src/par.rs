//! Data-parallel execution helpers.
//!
//! Every hot loop in the crate is a map over disjoint output chunks where
//! each chunk is computed with a fixed internal summation order. That makes
//! the parallel and sequential paths produce bitwise-identical results, so
//! determinism guarantees hold regardless of thread count.
//!
//! With the `parallel` feature (default) chunks are distributed by rayon;
//! without it, or when [`set_parallel`] disables it at runtime, the same
//! closures run in a plain sequential loop. Reductions are never
//! parallelized.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime switch on top of the compile-time feature; used by benches and
/// the CLI `--sequential` flag.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Applies `f(chunk_index, chunk)` over `out` split into `chunk_len` pieces.
/// The last chunk may be shorter. Chunks are disjoint, so parallel and
/// sequential execution write identical bytes.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_map_matches_sequential() {
        let fill = |_: usize, chunk: &mut [f64]| {
            let mut acc = 0.0;
            for (k, v) in chunk.iter_mut().enumerate() {
                acc += (k as f64 + 1.0).sqrt();
                *v = acc;
            }
        };
        let mut a = vec![0.0; 1003];
        let mut b = vec![0.0; 1003];
        set_parallel(true);
        for_each_chunk_mut(&mut a, 64, fill);
        set_parallel(false);
        for_each_chunk_mut(&mut b, 64, fill);
        set_parallel(true);
        assert_eq!(a, b);
    }

    #[test]
    fn map_indexed_order() {
        let v = map_indexed(10, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36, 49, 64, 81]);
    }
}
