//! Detection and causal verification of truth neurons in a toy
//! decoder-only transformer: exact-arithmetic autodiff, integrated-gradients
//! attribution, statistical selection, and suppression experiments.

pub mod attribution;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod intervention;
pub mod model;
pub mod plant;
pub mod selection;
pub mod stats;
pub mod tasks;
pub mod tensor;
pub mod train;
