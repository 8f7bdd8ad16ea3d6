//! Peaked stationary solutions of a coagulation-fragmentation model and the
//! dynamics of solutions that start close to them.
//!
//! The model is written in the logarithmic size variable `x = log2(size)`
//! and for the mass density `g = size * f`. Mass concentrates on the lattice
//! `x ∈ Z + rho`; every peak `n` is described by its mass `m_n`, the offset
//! `p_n` of its centre from `n` and its variance `q_n`.
//!
//! Kernels and the stationary family are generic over [`Real`]; the
//! simulation layers work in `f64`.

pub mod grid_sim;
pub mod kernels;
pub mod linear;
pub mod moment_ode;
pub mod representation;
pub mod stationary;

mod error;
mod ode;
mod scalar;

pub use error::{PeakError, Result};
pub use scalar::Real;

/// Kernel model in double precision.
pub type Kernel = kernels::KernelModel<f64>;
/// Kernel model in single precision.
pub type Kernel32 = kernels::KernelModel<f32>;
/// Stationary profile in double precision.
pub type Profile = stationary::StationaryProfile<f64>;
/// Stationary profile in single precision.
pub type Profile32 = stationary::StationaryProfile<f32>;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
