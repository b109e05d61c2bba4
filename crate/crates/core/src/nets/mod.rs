//! Fully connected encoder/decoder networks, their reverse-mode gradients, and Adam.

mod adam;
mod mlp;
pub mod tape;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use mlp::{
    bernoulli_loglik, bernoulli_loglik_grad, decode, decode_batch, encode, encode_frames,
    EncoderOutput, LayerSizes, MlpNodes, MlpParams,
};
pub use tape::{backward, Gradients, NodeId, Tape, PROB_CLAMP};
