//! Fixtures shared by the criterion benches.

use promoe::moe::{ProMoeLayerConfig, ProMoeParams, TcMoeConfig, TcMoeParams};
use promoe::rng::{normal_tensor, stream, Purpose};
use promoe::router::TokenPartition;
use promoe::Tensor;

/// Token count and width of the default toy batch (B=32, L=16, D=64).
pub const TOKENS: usize = 32 * 16;
pub const DIM: usize = 64;

pub fn tokens(seed: u64) -> Tensor<f32> {
    normal_tensor(&mut stream(seed, Purpose::Test, 0), &[TOKENS, DIM], 1.0)
}

/// Label-style partition with every tenth sample unconditional.
pub fn partition() -> TokenPartition {
    let mask: Vec<bool> = (0..TOKENS / 16).map(|b| b % 10 != 0).collect();
    TokenPartition::from_sample_mask(&mask, 16)
}

pub fn promoe_params(cfg: &ProMoeLayerConfig) -> ProMoeParams<Tensor<f32>> {
    ProMoeParams::init(&mut stream(0, Purpose::Init, 0), DIM, cfg).expect("valid config")
}

pub fn tc_params(cfg: &TcMoeConfig) -> TcMoeParams<Tensor<f32>> {
    TcMoeParams::init(&mut stream(0, Purpose::Init, 0), DIM, cfg).expect("valid config")
}
