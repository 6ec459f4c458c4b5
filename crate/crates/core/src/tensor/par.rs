//! Data-parallel dispatch for the compute kernels.
//!
//! Work is split into disjoint output chunks; every chunk is computed with a
//! fixed summation order, so results are bitwise identical whether the
//! `parallel` feature is on, off, or running on any number of threads.

#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
