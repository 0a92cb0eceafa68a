//! Super-resolution of two mutually interfering point-source channels.
//!
//! Two spectrally sparse signals observed through different low-pass PSFs,
//! `y = x1 + g ⊙ x2`, are separated by minimizing the sum of their atomic
//! norms. The crate covers synthesis of such measurements, a purpose-built
//! ADMM solver for the semidefinite form of the program, source localization
//! from the dual polynomials, construction of the Fejér-kernel dual
//! certificates, and a seeded Monte Carlo harness.

pub mod certificate;
pub mod dense;
pub mod error;
pub mod fejer;
pub mod harness;
pub mod instance;
pub mod localize;
pub mod sdp;
pub mod signal;
pub mod trig;

pub use error::{DemixError, Result};
pub use num_complex::Complex64;
