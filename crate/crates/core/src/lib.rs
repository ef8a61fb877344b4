//! Desk-scale laboratory for few-shot crop-type classification on parcel
//! time series.

pub mod data;
pub mod episodes;
pub mod error;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod token_codec;
pub mod train;

pub use error::{Error, Result};
