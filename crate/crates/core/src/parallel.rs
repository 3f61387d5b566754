//! Kernel thread pool, capped by the VNSA_THREADS environment variable.
//!
//! Every parallel region maps independent (head, position) cells; per-cell
//! reductions stay sequential, so outputs are identical at any thread count.

use once_cell::sync::Lazy;
use rayon::ThreadPool;

static POOL: Lazy<ThreadPool> = Lazy::new(|| {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("VNSA_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                builder = builder.num_threads(n);
            }
        }
    }
    builder.build().expect("kernel thread pool")
});

pub fn pool() -> &'static ThreadPool {
    &POOL
}
