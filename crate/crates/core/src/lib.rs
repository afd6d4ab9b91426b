//! Adaptive skill-context construction for frozen agents.
//!
//! The pipeline builds a compact skill library, labels per-task skill
//! utility in a seeded simulated world, trains a small scorer on those
//! labels, admits a per-task subset under a calibrated threshold and
//! renders the selected descriptions so overlapping skills state their
//! scope relative to each other.

pub mod domain;
pub mod baselines;
pub mod budget;
pub mod embed;
pub mod error;
pub mod harness;
pub mod librarian;
pub mod renderer;
pub mod planner;
pub mod simworld;
pub mod stats;

pub use error::{Error, Result};
