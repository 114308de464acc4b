//! Noise synthesis: fBm and Hermite processes driven by a [`WienerLattice`].
//!
//! [`WienerLattice`]: crate::lattice::WienerLattice

pub mod fbm;
pub mod hermite;
pub mod kernels;

pub use fbm::{CirculantFbm, KernelTable};
pub use hermite::{simulate_fbm, simulate_hermite, HermiteGenerator, NoisePath};
pub use kernels::{c_h, d_h, hurst_prime, kernel_dkh, kernel_kh, kernel_l, HermiteSpec};
