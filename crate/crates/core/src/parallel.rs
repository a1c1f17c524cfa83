//! Data-parallel loop shims.
//!
//! With the `parallel` feature (default), work is spread over rayon's pool;
//! without it, the same loops run sequentially. Each closure owns a disjoint
//! output chunk and accumulates in a fixed per-element order, so the results
//! are bit-identical under either build and any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to consecutive `chunk`-sized mutable windows of `out`,
/// passing the index of each chunk.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
