//! Deterministic data-parallel helpers. Work is partitioned into disjoint
//! output chunks, each computed sequentially, so results are bit-identical
//! whether the `parallel` feature is on or off and for any worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to every `chunk_len`-sized chunk of `data` with its chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map each index in `0..n` to a value, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> alloc::vec::Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
