#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Wideband ISAC beamforming with a stacked intelligent metasurface.

pub mod channels;
pub mod error;
pub mod experiments;
pub mod fisher;
pub mod linalg;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod scenario;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
