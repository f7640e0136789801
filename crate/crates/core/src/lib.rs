//! Target-agnostic hand-eye translation calibration for 2D laser profile
//! sensors mounted on a robot, together with a synthetic scanner simulator.
//!
//! The pipeline: scan a target along constant-orientation trajectories
//! ([`sim`]), rebuild each scan in the robot base frame using only the known
//! hand-eye rotation ([`reconstruct`]), register the target model into each
//! cloud ([`registration`]) and solve the stacked linear system for the
//! hand-eye translation ([`calib`]). [`experiment`] ties the stages together.
//!
//! Geometry and the solver are generic over [`Scalar`] (`f32` or `f64`); the
//! data-heavy stages work in `f64` through the aliases below.

pub mod calib;
pub mod cloud;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod reconstruct;
pub mod registration;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod spatial;
pub mod target;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Position or direction in mm.
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Rotation = geom::Rotation3<f64>;
pub type Transform = geom::RigidTransform<f64>;

pub type Vec3f = nalgebra::Vector3<f32>;
pub type Rotationf = geom::Rotation3<f32>;
pub type Transformf = geom::RigidTransform<f32>;
