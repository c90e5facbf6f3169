//! Adaptive CLF-constrained model predictive control (ACLF-MPC) for mechanical
//! systems with matched parametric uncertainty.
//!
//! The crate is organised bottom-up:
//!
//! - [`mechanics`]: rigid-body and manipulator dynamics, Slotine-Li regressors,
//!   and the ground-truth plant used by the simulator.
//! - [`clf`]: composite (sliding) errors, the Lyapunov candidate, the CLF
//!   stage constraint and the adaptive update law.
//! - [`ocp`]: the finite-horizon optimal control problem, its multiple-shooting
//!   transcription, the relaxed log-barrier, a Gauss-Newton SQP solver and
//!   LQR terminal costs.
//! - [`quadruped`]: the single-rigid-body quadruped model with an adaptive
//!   base wrench, contact schedules and friction cones.
//! - [`baselines`]: the controller variants compared in the experiments and the
//!   generalized-momentum observer.
//! - [`manipulator`]: a joint-space OCP model for any mechanical system and
//!   the two-link-arm scenario.
//! - [`simlab`]: the closed-loop simulation harness and metrics.

pub mod baselines;
pub mod clf;
pub mod linalg;
pub mod manipulator;
pub mod mechanics;
pub mod ocp;
pub mod parallel;
pub mod quadruped;
pub mod simlab;

pub use mechanics::GRAVITY;
