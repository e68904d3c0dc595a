//! Data-parallel helpers.
//!
//! With the `parallel` feature these fan out over the rayon pool; without it
//! they degrade to plain sequential loops. Every task writes a disjoint output
//! region and reduces in a fixed order, so results are bitwise identical
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar operations a loop is run inline.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `out`.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, work_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let chunks = out.len() / chunk;
        if chunks > 1 && chunks * work_per_chunk >= MIN_PARALLEL_WORK {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_per_chunk;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `items`, preserving order.
pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Send + Sync,
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

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_in_order() {
        let mut v = vec![0usize; 100_000];
        for_each_chunk_mut(&mut v, 1000, 1000, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert!(v.chunks(1000).enumerate().all(|(i, c)| c.iter().all(|&x| x == i)));
    }

    #[test]
    fn map_preserves_order() {
        let out = map_range(257, |i| i * 2);
        assert_eq!(out, (0..257).map(|i| i * 2).collect::<Vec<_>>());
    }
}
