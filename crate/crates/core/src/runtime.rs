//! Thread-count control.
//!
//! Parallelism is only ever applied across independent output elements
//! (rows, planes, batch items); every single output value is produced by the
//! same sequential reduction regardless of thread count, so results are
//! bitwise identical whether `AMSN_THREADS` is 1 or 16. Setting the count to
//! 1 additionally routes all kernels through their serial code paths.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

fn detect() -> usize {
    if let Ok(v) = std::env::var("AMSN_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Pin the worker thread count. First caller wins; later calls are ignored
/// (the rayon pool cannot be rebuilt once used).
pub fn set_threads(n: usize) {
    let _ = THREADS.set(n.max(1));
}

/// Effective worker thread count (env `AMSN_THREADS`, else all cores).
pub fn threads() -> usize {
    *THREADS.get_or_init(detect)
}

/// Whether kernels should take their parallel code paths.
pub fn parallel() -> bool {
    threads() > 1
}

/// Run `f` inside a rayon pool sized to `threads()`.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    let pool = POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads())
            .build()
            .expect("rayon pool")
    });
    pool.install(f)
}
