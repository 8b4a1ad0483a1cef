//! Process-level runtime knobs: worker threads and allocator behavior.

use std::sync::atomic::{AtomicBool, Ordering};

static INITIALIZED: AtomicBool = AtomicBool::new(false);

/// Configures thread pools and the allocator for long runs. Call once at
/// startup, before any tensor work.
///
/// `deterministic` forces serial execution; the parallel kernels are already
/// bit-deterministic for any worker count, so this is belt and braces for
/// reproduction runs. `threads = None` uses the available parallelism.
pub fn init(threads: Option<usize>, deterministic: bool) {
    if INITIALIZED.swap(true, Ordering::SeqCst) {
        return;
    }
    let n = if deterministic {
        1
    } else {
        threads.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(1)
        })
    };
    // matrixmultiply reads this lazily at the first dgemm
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();

    // The training loop allocates and frees multi-megabyte score matrices
    // every iteration. Keep those on the heap instead of per-allocation mmap
    // so the kernel does not fault in and zero fresh pages each time.
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 512 << 20);
    }
}
