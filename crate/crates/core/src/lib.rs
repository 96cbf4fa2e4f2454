//! Scenario-tree approximations of multistage stochastic programs and
//! policy selection by supervised learning.

pub mod detequiv;
pub mod error;
pub mod evaluate;
pub mod learn;
pub mod normal;
pub mod pipeline;
pub mod problems;
pub mod process;
pub mod restore;
pub mod rng;
pub mod solver;
pub mod tree;

pub use error::{Error, Result};
