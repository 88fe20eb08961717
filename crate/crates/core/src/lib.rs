//! Closed-loop imitation learning for a planar driving policy through a
//! differentiable simulator.

pub mod evaluator;
pub mod geometry;
pub mod grad;
pub mod losses;
pub mod policy;
pub mod real;
pub mod scene;
pub mod se2;
pub mod sim;
pub mod synth;
pub mod trainer;

pub use real::{wrap_angle, Real};
pub use se2::Pose;

pub type Pose64 = se2::Pose<f64>;
pub type Pose32 = se2::Pose<f32>;
pub type Tape64 = grad::Tape<f64>;
pub type Tape32 = grad::Tape<f32>;
pub type ParamStore64 = grad::ParamStore<f64>;
pub type ParamStore32 = grad::ParamStore<f32>;
