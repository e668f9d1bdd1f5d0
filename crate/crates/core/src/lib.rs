//! Rain detection and rainfall estimation from surveillance video and
//! audio, with an irrigation scheduler on top.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoroi;
pub mod error;
pub mod features;
pub mod ingest;
pub mod irrigation;
pub mod model;
pub mod motion;
pub mod pipeline;
pub mod rainfall;
pub mod synth;

pub use error::{Error, Result};
