//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it
//! (or inside [`sequential`]) they run in a plain loop. Work is always
//! split into the same chunks so a kernel computes each output element
//! with the same instruction sequence either way.

use std::cell::Cell;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with parallel dispatch disabled on the current thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQUENTIAL.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

/// Whether helpers called on this thread will use rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(Cell::get)
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk_len`-sized chunks.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && data.len() > chunk_len {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Elementwise map into a fresh buffer.
pub fn map_slice<F>(src: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    const CHUNK: usize = 1 << 14;
    let mut out = vec![0.0; src.len()];
    for_each_chunk_mut(&mut out, CHUNK, |ci, dst| {
        let base = ci * CHUNK;
        for (j, d) in dst.iter_mut().enumerate() {
            *d = f(src[base + j]);
        }
    });
    out
}

/// Elementwise binary map into a fresh buffer. Slices must have equal length.
pub fn zip_slice<F>(a: &[f64], b: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64, f64) -> f64 + Sync + Send,
{
    debug_assert_eq!(a.len(), b.len());
    const CHUNK: usize = 1 << 14;
    let mut out = vec![0.0; a.len()];
    for_each_chunk_mut(&mut out, CHUNK, |ci, dst| {
        let base = ci * CHUNK;
        for (j, d) in dst.iter_mut().enumerate() {
            *d = f(a[base + j], b[base + j]);
        }
    });
    out
}
