//! Kernel-operator data-enabled predictive control.
//!
//! Learns a lifted input/state -> output-trajectory operator from data in a
//! product RKHS and exposes predictive controllers built on top of it: an
//! efficient formulation that works in a reduced decision space, full-size
//! baselines (product and stacked kernels), and a model-based NMPC reference.

pub mod cli;
pub mod config;
pub mod controller;
pub mod datagen;
pub mod error;
pub mod kernels;
pub mod numerics;
pub mod plant;
pub mod predictor;
pub mod solver;

pub use error::{Error, Result};
