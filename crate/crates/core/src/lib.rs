//! Conductivity and voltage reconstruction from interior current-density
//! magnitude data with a pair of physics-informed tanh networks.
//!
//! Pipeline: [`data`] manufactures a synthetic dataset with the
//! [`solver`] finite-difference forward model, [`trainer`] minimizes the
//! empirical risk assembled in [`loss`] with Adam, and [`eval`] measures
//! reconstructions on a dense grid. [`sizing`] tabulates the theoretical
//! network-size prescriptions.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod loss;
pub mod network;
pub mod parallel;
pub mod sizing;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
