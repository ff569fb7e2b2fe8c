//! Differentiable control barrier functions for learned driving policies:
//! a curvilinear vehicle model, high-order CBF constraints, a differentiable
//! QP layer, the trainable policy, an NMPC expert and a closed-loop harness.

pub mod barriernet;
pub mod config;
pub mod diffqp;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod hocbf;
pub mod io;
pub mod linalg;
pub mod nominal_mpc;
pub mod scalar;
pub mod scenario;

pub use error::{Error, Result};
pub use scalar::{Dual, Scalar};

pub type State = dynamics::CurvilinearState<f64>;
pub type StateF32 = dynamics::CurvilinearState<f32>;
pub type Params = dynamics::VehicleParams<f64>;
pub type ParamsF32 = dynamics::VehicleParams<f32>;
pub type Path = dynamics::ReferencePath<f64>;
pub type PathF32 = dynamics::ReferencePath<f32>;
pub type Qp = diffqp::QpProblem<f64>;
pub type QpF32 = diffqp::QpProblem<f32>;
pub type Barrier = hocbf::BarrierSpec<f64>;
pub type BarrierF32 = hocbf::BarrierSpec<f32>;
