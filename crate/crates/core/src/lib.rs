//! Event-triggered certainty-equivalence adaptive control with a batch
//! least-squares identifier.
//!
//! The closed loop keeps the parameter estimate constant between events,
//! applies the nominal feedback with the current estimate, and at every
//! event solves a constrained minimum-distance update against the
//! accumulated regression quantities. The crate provides the hybrid
//! simulator, the wing-rock and LTI chain benchmark plants with their
//! stabilizing feedback designs, a classical extended-matching adaptive
//! comparator, scenario configuration, CSV emission, and a post-hoc
//! verifier for the scheme's closed-loop guarantees.

// `!(v > 0.0)` deliberately rejects NaN along with nonpositive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod comparator;
pub mod control;
pub mod csv;
pub mod identifier;
pub mod integrator;
pub mod plant;
pub mod qp;
pub mod quadrature;
pub mod run;
pub mod scenario;
pub mod sim;
pub mod verify;

mod error;

pub use error::Error;
pub use plant::{BoxSet, InputVec, NoiseSpec, ParamVec, PlantModel, StateVec};

pub type Result<T> = std::result::Result<T, Error>;
