//! BERT-style encoder built on the differentiable graph.

mod config;
mod encoder;
mod sequence;
mod weights;

pub use config::EncoderConfig;
pub use encoder::{
    attention_head, embed, forward, forward_from_embeddings, EncoderTrace, HeadWeights, LayerTrace,
};
pub use sequence::TokenizedSequence;
pub use weights::{load_weights, tensor_specs, LayerWeights, ModelWeights};
