//! Compatibility layer for rayon/sequential execution.
//!
//! With the `parallel` feature (default) the fan-out helpers run on rayon;
//! without it they fall back to plain sequential iteration with the same
//! signatures, so callers never branch on the feature themselves.

#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: Vec<T>, width: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Send + Sync,
{
    use rayon::prelude::*;
    if width == 0 {
        items.into_par_iter().map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(width)
            .build()
            .expect("thread pool");
        pool.install(|| items.into_par_iter().map(f).collect())
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: Vec<T>, _width: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Send + Sync,
{
    items.into_iter().map(f).collect()
}

/// Sequential reference path, kept available under both features so benches
/// can compare against the parallel fan-out directly.
pub fn map_collect_seq<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}
