//! Task-adapted multi-task dense prediction on a frozen hierarchical
//! vision transformer.

pub mod adapter;
pub mod affinity;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod decoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod taa;
pub mod train;
pub mod verify;
pub mod viz;

pub use error::{Error, Result};
