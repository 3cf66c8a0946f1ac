//! Worker pool sizing. `VOLUMIX_THREADS` caps the pool; the default is one
//! thread. Parallel sections split work so that each output element is
//! produced by a single worker, so results do not depend on the thread count.

use std::sync::OnceLock;

pub const THREADS_ENV: &str = "VOLUMIX_THREADS";

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

fn requested() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(requested())
            .thread_name(|i| format!("volumix-{i}"))
            .build()
            .expect("failed to build worker pool")
    })
}

/// Number of worker threads in use.
pub fn threads() -> usize {
    pool().current_num_threads()
}

/// Runs `f` inside the sized pool.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    pool().install(f)
}
