//! Gaussian smoothing for continuous-discrete stochastic dynamic systems.
//!
//! Two smoothers are provided for systems with SDE dynamics and discrete
//! measurements: the Gaussian-filtering-based smoother (filter + backward
//! Type II moment pass) and the iterative variational Gaussian smoother that
//! minimizes the KL divergence of a linear approximating process. Gaussian
//! expectations can be computed analytically (where a model supplies hooks),
//! by Taylor linearization, or by cubature/unscented/Gauss-Hermite sigma
//! points, including the Jacobian-based alternative gradient forms.

pub mod bench;
pub mod cd_filter;
pub mod cd_smoother;
pub mod error;
pub mod grid_reference;
pub mod metrics;
pub mod models;
pub mod odeint;
pub mod quadrature;
pub mod vgs_core;
pub mod vgs_expect;

pub use error::{Error, Result};
