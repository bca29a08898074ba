//! Certified bi-Lipschitz networks and Polyak-Lojasiewicz surrogate losses.
//!
//! This crate builds residual layers with certified strong monotonicity and
//! Lipschitz bounds, composes them with orthogonal affine layers into
//! bi-Lipschitz networks whose distortion is controlled by construction, and
//! inverts them exactly with a three-operator splitting solver. A quadratic
//! potential on top yields scalar networks satisfying the
//! Polyak-Lojasiewicz inequality, whose unique global minimum is computed by
//! running the network backwards rather than by gradient descent.
//!
//! Main pieces:
//!
//! - [`numerics`]: dense matrices and a reverse-mode autodiff tape.
//! - [`cayley`]: column-orthonormal matrices from unconstrained parameters,
//!   and orthogonal affine layers.
//! - [`monlip`]: the monotone-and-Lipschitz residual layer, its direct
//!   parameterization, and the algebraic certificate checker.
//! - [`bilipnet`]: composition into bi-Lipschitz models, exact inversion,
//!   and the bias-conditioned variant.
//! - [`solvers`]: Davis-Yin splitting and the forward-step baseline, plus
//!   the proximal-operator registry for activations.
//! - [`plnet`]: scalar potential networks with computable global minima and
//!   empirical verifiers.
//! - [`harness`]: datasets, Adam + one-cycle training loop, and experiment
//!   orchestration backing the CLI.
//! - [`model_io`]: versioned binary model files and JSON reports.

pub mod bilipnet;
pub mod cayley;
mod error;
pub mod harness;
pub mod model_io;
pub mod monlip;
pub mod numerics;
pub mod plnet;
pub mod solvers;

pub use error::{Error, Result};
pub use numerics::{Activation, Matrix, NodeId, Tape};
