//! Ordered fan-out over independent work items.
//!
//! Results always come back in index order, so any reduction the caller
//! performs afterwards sees the same sequence at every worker count.

/// Evaluates `f(0..len)` with up to `workers` threads and returns the results
/// in index order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, F>(workers: usize, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;

    if workers <= 1 || len <= 1 {
        return (0..len).map(f).collect();
    }
    match pool(workers) {
        Some(pool) => pool.install(|| (0..len).into_par_iter().map(&f).collect()),
        None => (0..len).map(f).collect(),
    }
}

/// One lazily built pool per requested size, kept for the process lifetime.
#[cfg(feature = "parallel")]
fn pool(workers: usize) -> Option<std::sync::Arc<rayon::ThreadPool>> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};

    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    if let Some(p) = pools.get(&workers) {
        return Some(p.clone());
    }
    let p = Arc::new(rayon::ThreadPoolBuilder::new().num_threads(workers).build().ok()?);
    pools.insert(workers, p.clone());
    Some(p)
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, F>(_workers: usize, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).map(f).collect()
}

/// Worker count from `CONTRASTCAM_WORKERS`, defaulting to 1.
pub fn workers_from_env() -> usize {
    std::env::var("CONTRASTCAM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}
