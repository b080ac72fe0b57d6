//! Data-parallel helpers with a sequential fallback.
//!
//! All hot loops in this crate are per-item maps with no shared mutable
//! state, so outputs are independent of scheduling and results stay
//! bit-identical whether or not the `parallel` feature is enabled.
//! Reductions over floats are always performed sequentially in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
///
/// Uses the rayon pool when the `parallel` feature is enabled, otherwise
/// falls back to [`map_indexed_seq`].
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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
        map_indexed_seq(n, f)
    }
}

/// Sequential twin of [`map_indexed`]; always runs on the calling thread.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Apply `f` to each element of `items` in place.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, item)| f(i, item));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, item) in items.iter_mut().enumerate() {
            f(i, item);
        }
    }
}
