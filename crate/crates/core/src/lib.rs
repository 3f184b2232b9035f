//! MEA: asynchronous multimodal sequence fusion with modality-exclusive and
//! modality-agnostic representations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decouple;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod hca;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod probe;
pub mod psa;
pub mod tensor;
pub mod train;
pub mod unimodal;

pub use error::{Error, Result};
