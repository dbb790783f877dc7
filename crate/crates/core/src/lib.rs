//! Federated source-free domain adaptation with style-based client clustering.
//!
//! Clients share only the mean low-frequency Fourier amplitude of their
//! images. The server clusters clients by that style, pre-trains a model on
//! labeled source data stylized with the collected styles, and then runs
//! federated self-training where some parameter groups are averaged globally
//! and others only within a style cluster.

pub mod checkpoint;
pub mod clustering;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod image;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod spectral;
pub mod synthdata;

pub use error::{Error, Result};
