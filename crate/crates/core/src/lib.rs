//! Estimation for spatial autoregressive models observed through additive
//! privacy noise.
//!
//! The observation model is
//!
//! ```text
//! Y* = (I - rho W)^{-1} (X beta + e) + eps,     X2* = X2 + eps_x
//! ```
//!
//! with known noise variances `lambda2` (response) and `lambda2_x`
//! (protected covariates). Three estimators are provided:
//!
//! * [`qmle::fit_qmle`] — the naive quasi-likelihood fit that ignores the
//!   noise. Biased, but a good starting point.
//! * [`cle::fit_cle`] — Newton iteration on the noisy likelihood with
//!   analytic bias corrections to the score and Hessian. O(N^3).
//! * [`cls::fit_cls`] — Newton iteration on a conditional-expectation
//!   least-squares objective with its own corrections. Sparse throughout.
//!
//! [`inference`] adds parametric-bootstrap standard errors, and
//! [`harness`] runs seeded Monte Carlo studies over the generators in
//! [`network`].


// `!(x > 0.0)` is the intended NaN-rejecting test throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cle;
pub mod cls;
pub mod error;
pub mod extensions;
pub mod harness;
pub mod inference;
pub mod network;
pub mod qmle;
pub mod rng;
pub mod sim;
pub mod spmat;

pub use error::{PsarError, Result};

pub use inference::{EstimatorKind, FitResult};
pub use network::{Adjacency, WeightMatrix};
pub use sim::{NoiseLaw, ObservedData, PrivacyConfig, Theta};
