//! Spectral-Galerkin simulation of the stochastic PDE
//!
//! ```text
//! dX = (∂²_ξ X + f(t, X) + ∂_ξ g(t, X)) dt + √G dW   on (0, 1),  X(t, 0) = X(t, 1) = 0
//! ```
//!
//! together with numerical checks of its energy, moment, Lyapunov and
//! Fokker-Planck properties.

pub mod drift;
pub mod error;
pub mod fpe;
pub mod harness;
pub mod noise;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use spectral::{EigenSystem, GridField, NormTriple, SpectralField, TransformKind};
