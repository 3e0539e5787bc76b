//! Shared-weight recursive multimodal decoder with recursive connectors, a
//! monotonic recursion loss and layer-wise diagnostics.

pub mod connector;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
