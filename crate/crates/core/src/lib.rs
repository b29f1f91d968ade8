//! Primal-dual penalty (PDP) solver for control-constrained optimal control.
//!
//! The ODE boundary-value constraints are eliminated by single shooting into an
//! equality residual `h(u) = 0`; the outer loop raises an exact l1 penalty
//! parameter along dual subgradient steps. Each inner problem is smoothed with a
//! shrinking Huber width and minimized over the control box by a truncated-Newton
//! trust region (projected L-BFGS when no curvature model is available).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificate;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod inner;
pub mod model;
pub mod pdp;
pub mod penalty;
pub mod shooting;

pub use error::{Error, Result};
pub use grid::{BoxBounds, ControlTrajectory, StateTrajectory, TimeGrid};
pub use model::{OcpModel, ProblemInstanceId};
pub use pdp::{pdp_run, PdpConfig, PdpResult, PdpStatus, StepRule};
