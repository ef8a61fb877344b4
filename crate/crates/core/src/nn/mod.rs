//! Transformer encoder, classification head and parameter registry.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod params;

pub use checkpoint::Checkpoint;
pub use config::TransformerConfig;
pub use layers::{
    argmax_rows, classify, cross_entropy, encode, pool_sequence, sinusoidal_encoding,
};
pub use model::{
    batch_logits, init_model, logits, polar_to_cartesian, prepare_input, sample_embedding,
    InputBody, InputSpec, ModelInput, ModelSpec, TaskInfoMode,
};
pub use params::{ModelParams, ParamMap, Section, TensorMap, TensorParams};

#[cfg(test)]
mod tests;
