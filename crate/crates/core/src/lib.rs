//! Control of unknown linear dynamical systems under adversarial disturbances
//! and changing convex costs: explore with random inputs, recover `(A, B)`
//! from input-state moments, then run a gradient-based perturbation
//! controller on the recovered model.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod cli;
pub mod error;
pub mod gpc;
pub mod lds;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod sysid;
pub mod verify;

pub use error::{Error, Result};
pub use gpc::{GpcController, PerturbationPolicy};
pub use lds::{
    CostGen, CostKind, DisturbanceGen, DisturbanceKind, Instance, InstanceSpec, LinSystem, StabilityCertificate,
    StageCost, Trajectory,
};
pub use numerics::Mat;
pub use pipeline::{
    build_experiment, run_algorithm1, Algorithm1Run, Experiment, ExperimentConfig, RegretReport, RunOptions, SweepRow,
};
pub use scalar::Real;
pub use sysid::SysIdEstimate;

pub type Mat64 = Mat<f64>;
pub type Mat32 = Mat<f32>;
pub type LinSystem64 = LinSystem<f64>;
pub type LinSystem32 = LinSystem<f32>;
pub type Controller64 = GpcController<f64>;
pub type Controller32 = GpcController<f32>;
pub type Experiment64 = Experiment<f64>;
pub type Experiment32 = Experiment<f32>;
