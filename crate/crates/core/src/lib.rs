//! Session-based next-item recommendation with a multi-level attention
//! mixture readout.

pub mod numerics;
pub mod data;
pub mod model;
pub mod training;
pub mod eval;
pub mod synthetic;
pub mod sparsity;
pub mod config;
pub mod cli;
