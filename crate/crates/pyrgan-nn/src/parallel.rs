//! Thin indirection over rayon so the whole engine can be built sequential.
//!
//! With the `parallel` feature the helpers fan out over rayon; without it they
//! degrade to plain loops. Callers only ever parallelize over independent
//! work items (batch elements, samples, scans) and keep every floating-point
//! reduction sequential, so outputs do not depend on thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` to a Vec, preserving index order.
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
        (0..n).map(f).collect()
    }
}

/// Apply `f` to each element of a slice of independent work items.
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

/// True when this build actually fans work out over rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
