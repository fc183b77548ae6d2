//! Transformer blocks, attention pooling and the position-aware input embeddings.

mod config;
mod layers;
mod params;

pub use config::{IsmPlacement, ModelConfig};
pub use layers::{
    AttnPool, DecoderBlock, DecoderStack, EncoderBlock, EncoderStack, FeedForward, LayerNorm,
    Linear, MultiHeadAttention, RegionEmbedding, WordEmbedding,
};
pub use params::{Group, ParamBuilder, ParamId, ParamStore};

#[cfg(test)]
mod tests;
