//! Observation-conditioned uncertainty calibration for a planar double
//! integrator, end to end: a linear Gaussian motion model, a semantic polar
//! sensor, a convolutional footprint encoder, tree-partitioned split
//! calibration of model error, and a sampling-based planner that keeps
//! calibrated prediction regions out of obstacles.

pub mod cli;
pub mod conformal;
pub mod dataset;
pub mod dynamics;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod maps;
pub mod math;
pub mod planner;
pub mod render;
pub mod sensor;
pub mod tree;
pub mod world;

pub use error::{Error, Result};
