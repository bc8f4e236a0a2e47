//! Few-shot multi-class anomaly detection in embedding space.

// `!(x > 0.0)` rejects NaN too; numeric kernels index several arrays per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod infer;
pub mod metrics;
pub mod abf;
pub mod bundle;
pub mod cbl;
pub mod dcf;
pub mod model;
pub mod numgrad;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
