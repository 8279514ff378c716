//! Numerical laboratory for the m-particle discretization of potential mean
//! field games.
//!
//! A potential game in this setting is generated by two functionals on
//! probability measures together with a Hamiltonian `H` on phase space. The
//! laboratory studies the finite-dimensional projections
//!
//! ```text
//! U^m(t, q) = value of the m-particle control problem,  q in (R^d)^m,
//! ```
//!
//! their characteristic flows, the induced Wasserstein gradients, and the
//! master equations those gradients satisfy. The point of the exercise is
//! quantitative: derivative tensors of `U^m` obey explicit powers of `1/m`,
//! convexity of the generating functionals is inherited at rate `lambda/m`,
//! and all of it can be checked numerically on concrete model families.
//!
//! Module map:
//!
//! * [`fields`]: closed-form scalar fields with analytic derivatives.
//! * [`model`]: mechanical Hamiltonians `H = p A^-1 p / 2 - g(q)` and audits.
//! * [`measures`]: empirical measures, optimal transport, interpolation.
//! * [`data`]: generating functionals of interaction type and their discrete
//!   derivative tables, Fourier and displacement convexity certificates.
//! * [`flow`]: the m-particle Hamiltonian flow, its variational system,
//!   Jacobians, flow inversion and the block ODE scaling models.
//! * [`value`]: `U^m` by characteristics and by direct minimization,
//!   Wasserstein gradients, Hessian kernels, scaling studies.
//! * [`master`]: the scalar and vectorial master equations along measure
//!   flows, and the Hopf-Lax counterexample.
//! * [`config`], [`experiment`], [`report`]: the JSON-driven experiment
//!   runner behind the `mfglab` binary.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fields;
pub mod flow;
pub mod master;
pub mod measures;
pub mod model;
pub(crate) mod num;
pub mod report;
pub(crate) mod sampling;
pub mod value;

pub use error::{Error, Result};
