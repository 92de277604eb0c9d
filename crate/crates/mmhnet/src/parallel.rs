//! Worker pool sized by `MMHNET_THREADS` (default: available parallelism).
//!
//! Work is only split across independent traces and results come back in
//! input order, so outputs do not depend on the thread count.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

pub const THREADS_ENV: &str = "MMHNET_THREADS";

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build().expect("thread pool"))
}

/// Ordered parallel map.
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if items.len() <= 1 || pool().current_num_threads() == 1 {
        return items.iter().map(f).collect();
    }
    pool().install(|| items.par_iter().map(f).collect())
}
