//! Runs independent jobs `0..count` and returns their results in index order.
//!
//! With the `parallel` feature and `jobs > 1` the work goes to a dedicated
//! rayon pool of `jobs` threads; otherwise it runs on the calling thread. Each
//! job only sees its own index, so the output does not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `jobs = 0` is treated as 1.
pub fn run_indexed<T, F>(count: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 && count > 1 {
        // if the pool cannot be built, fall through to the sequential path
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| (0..count).into_par_iter().map(&f).collect());
        }
    }
    let _ = jobs;
    run_sequential(count, f)
}

pub fn run_sequential<T, F: Fn(usize) -> T>(count: usize, f: F) -> Vec<T> {
    (0..count).map(f).collect()
}

/// True when this build can run sweeps on more than one thread.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
