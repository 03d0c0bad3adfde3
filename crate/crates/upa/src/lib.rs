//! Std companion to `upa-core`: file formats, synthetic datasets, training,
//! attention-map analysis, ablations and scaling benchmarks.

pub mod alloc_count;
pub mod ablate;
pub mod analyze;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod train;

pub use error::{Error, Result};

/// Keeps large tensor buffers inside the malloc heap instead of mapping and
/// unmapping them on every allocation; training otherwise spends most of its
/// time in page faults. No-op outside glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 512 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
