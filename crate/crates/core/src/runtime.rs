//! Process-level knobs for long numerical runs.

use std::sync::Once;

use crate::error::{Error, Result};

/// Keeps freed heap memory mapped instead of handing it back to the kernel.
///
/// Every training step builds and drops a tape of multi-megabyte buffers.
/// With the default glibc policy those are unmapped and faulted back in on
/// the next step, which can cost more than the arithmetic. Other platforms
/// are unaffected. Idempotent.
pub fn retain_freed_memory() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator tunables; called once, before
        // any of our large allocations.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        }
    });
}

/// Sizes the global rayon pool from `CFEE_THREADS` if set.
///
/// Returns the thread count in effect. Fails if the variable is not a
/// positive integer or the pool was already built with another size.
pub fn configure_threads() -> Result<usize> {
    match std::env::var("CFEE_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::Config(format!("CFEE_THREADS must be a positive integer, got {v:?}")))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(n)
        }
        Err(_) => Ok(rayon::current_num_threads()),
    }
}
