//! Library side of the `fedstyle` command: config handling, experiment
//! execution with on-disk artifacts, and run comparison.

pub mod compare;
pub mod config;
pub mod runner;
