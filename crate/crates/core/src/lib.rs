//! Loping Levenberg-Marquardt-Kaczmarz iteration for systems of nonlinear
//! ill-posed equations `F_i(x) = y_i`, `i = 0..N`, with noisy data.
//!
//! Each step linearizes one equation of the system, computes the
//! Levenberg-Marquardt correction
//!
//! ```text
//! h_k = (F'(x_k)* F'(x_k) + alpha I)^{-1} F'(x_k)* (y^δ − F(x_k))
//! ```
//!
//! for the equation with index `k mod N`, and skips ("lopes") the update
//! whenever that equation's residual is already below `tau·δ`. The run stops
//! after the first cycle in which every equation loped.
//!
//! * [`linop`]: matrix-free linear maps and the regularized inner solve.
//! * [`model`]: operator families, noisy data and residuals.
//! * [`kaczmarz`]: the solvers, parameter selection and trace diagnostics.
//! * [`problems`]: built-in test problems with known ground truth.
//! * [`harness`]: experiment specs, artifact files, sweeps and verification.

pub mod harness;
pub mod kaczmarz;
pub mod linop;
pub mod model;
pub mod problems;
pub mod vector;
