//! Diffusion bridges in function spaces, simulated in a spectral basis.

pub mod basis;
pub mod bayesian_learning;
pub mod bridge_matching;
pub mod control_net;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod io;
pub mod optim;
pub mod ou_bridge;
pub mod rng;
pub mod sde;
pub mod selftest;

pub use error::{Error, Result};

/// Keep large temporaries on the heap instead of fresh `mmap` regions.
///
/// The simulators allocate and free multi-megabyte matrices every step; with
/// glibc's default thresholds each of those round-trips through the kernel.
/// Call once at program start. No-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
