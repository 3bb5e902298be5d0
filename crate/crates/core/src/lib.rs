//! Desk-scale numerical laboratory for stochastic optimal control on
//! finite spectral truncations of Hilbert-space state equations.
//!
//! The state equation is a controlled stochastic evolution equation
//!
//! ```text
//! dX(s) = (A X(s) + a(s, X(s), u(s))) ds + b(s, X(s), u(s)) dW(s)
//! ```
//!
//! truncated to the leading `N` eigenmodes of `A`, so that the semigroup
//! `S(t) = exp(tA)` acts exactly and the operator-valued second-order
//! adjoint equation becomes an ordinary matrix BSDE. On top of the forward
//! Monte Carlo simulator the crate provides:
//!
//! * regression-based backward solvers for cost functionals, recursive
//!   BSDE costs and the first/second-order adjoint equations
//!   ([`backward`], [`adjoint2`]),
//! * dynamic-programming value fields with finite-difference derivative
//!   estimators and super/subdifferential membership tests ([`value`]),
//! * a closed-form linear-quadratic oracle ([`riccati`]),
//! * theorem-level verification checks relating the maximum principle to
//!   dynamic programming ([`verify`]).
//!
//! All randomness is drawn from counter-based per-path streams
//! ([`spectral::NoiseModel`]); any result is bit-reproducible from its
//! `(seed, configuration)` pair regardless of evaluation order.

pub mod adjoint2;
pub mod backward;
pub mod error;
pub mod forward;
pub mod problem;
pub mod report;
pub mod riccati;
pub mod spectral;
pub mod stats;
pub mod value;
pub mod verify;

pub use error::{Error, Result};
pub use problem::SpectralProblem;
pub use spectral::{NoiseModel, SpectralOperator, TimeGrid};
