//! Risk-sensitive optimal control of reflected diffusions in the nonnegative orthant.
//!
//! The crate covers the whole numerical pipeline:
//!
//! * [`domain`]: orthant geometry, the finite action set with relaxed (mixed)
//!   controls, the coefficient catalog and assumption audits.
//! * [`sde`]: Euler–Maruyama simulation with an oblique Skorokhod projection.
//! * [`cost`]: Monte Carlo estimators for discounted and ergodic
//!   exponential-of-integral costs and the multiplicative dynamic programming
//!   residual.
//! * [`discounted`]: the monotone θ-marching solver for the discounted HJB
//!   equation with oblique boundary conditions.
//! * [`ergodic`]: the vanishing-discount construction of the ergodic value ρ.
//! * [`recurrence`]: hitting-probability PDE and Monte Carlo recurrence audits.
//! * [`verify`]: martingale-identity tests and the end-to-end suite.

pub mod cost;
pub mod discounted;
pub mod domain;
pub mod ergodic;
mod error;
pub mod grid;
pub mod policy;
pub mod recurrence;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
