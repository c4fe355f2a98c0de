//! Minimal neural-network building blocks with hand-written gradients.

pub mod layers;
pub mod optim;

pub use layers::{Conv3x3, LayerNorm, Linear, MapShape, SelfAttention};
pub use optim::{clip_grad_norm, Optimizer, OptimizerConfig, Param};

use crate::seed::ContentDigest;

/// Digest of parameter values (bit patterns), used to check that weights are untouched.
pub fn param_checksum<'a>(params: impl IntoIterator<Item = &'a Param>) -> String {
    let mut d = ContentDigest::new();
    for p in params {
        let bytes: Vec<u8> = p
            .value
            .iter()
            .flat_map(|v| v.to_bits().to_le_bytes())
            .collect();
        d.update(&bytes);
    }
    d.finish()
}
