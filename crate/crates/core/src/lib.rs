#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Closed-loop control of cold-spray deposition: a surface-evolution model,
//! iLQR trajectory optimization, guided policy search over a neural speed
//! policy, model calibration, and an evaluation harness.

pub mod calibration;
pub mod cli;
pub mod cost;
pub mod error;
pub mod gps;
pub mod harness;
pub mod ilqr;
pub mod model;
pub mod policy;

pub use error::{Error, Result};
