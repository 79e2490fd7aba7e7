//! Divide-conquer-combine sampling over soft Bayesian decision trees.

pub mod cli;
pub mod config;
pub mod data;
pub mod evidence;
pub mod math;
pub mod model;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod scheduler;
pub mod tree;
