//! Deterministic attention primitives: vanilla, rotary, masked, linear and
//! single-head local attention, plus seeded weights and their file format.

pub mod kernels;
pub mod rotary;
pub mod store;
pub mod weights;

pub use kernels::{
    linear_attention, linear_cross_attention, masked_attention, masked_attention_with_probs,
    rotary_attention_with_probs, rotary_self_attention, single_head_local_attention, softmax,
    vanilla_attention, vanilla_attention_with_probs, Attended, KeySet, LocalMatch,
};
pub use rotary::{rotary_matrix, RotaryEmbedding3D};
pub use store::{decode_weights, encode_weights};
pub use weights::{AttentionWeights, Linear, Mlp, Parameters, RngSeed, WeightInit};
