//! Bound tightening and complete verification for feed-forward ReLU networks.
//!
//! The pipeline is: parse a network and a property, compute pre-activation
//! bounds (interval propagation, LP relaxation, or rolling-horizon
//! optimization-based tightening), then solve the big-M verification MILP
//! with those bounds and report a verdict plus bound-quality metrics.

pub mod error;
pub mod fixture;
pub mod graph;
pub mod interval;
pub mod lp;
pub mod milp;
pub mod obbt;
pub mod parse;
pub mod verify;

pub use error::{Error, Result};
