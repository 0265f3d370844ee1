pub mod archive;
pub mod config;
pub mod data;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod projector;
pub mod rng;
pub mod synthesis;
pub mod teachers;
pub mod transfer;

pub use error::{Error, Result};

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every op. glibc's adaptive thresholds otherwise mmap and unmap
/// most activation buffers, which doubles wall time on small machines.
/// Idempotent; a no-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
        });
    }
}
