//! Shared strided-convolution encoder/decoder stacks used by every VQ stage.
//!
//! Downsampling by a factor f uses log2(f) blocks of kernel-4 stride-2
//! convolutions; decoding mirrors them with transposed convolutions.

use duet_core::rng::ChaCha12Rng;
use duet_core::{nn, Graph, NodeId, ParamStore};

pub fn blocks_for_factor(f: usize) -> usize {
    assert!(f.is_power_of_two() && f >= 2, "downsample factor must be a power of two >= 2");
    f.trailing_zeros() as usize
}

/// [T, in_ch] -> [T/f, latent]
pub fn build_encoder(
    g: &mut Graph,
    params: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    x: NodeId,
    in_ch: usize,
    hidden: usize,
    latent: usize,
    factor: usize,
) -> NodeId {
    let mut h = x;
    let mut ch = in_ch;
    for b in 0..blocks_for_factor(factor) {
        h = nn::conv1d(g, params, rng, &format!("{prefix}.b{b}"), h, ch, hidden, 4, 2, 1);
        h = g.relu(h);
        ch = hidden;
    }
    nn::conv1d(g, params, rng, &format!("{prefix}.proj"), h, ch, latent, 3, 1, 1)
}

/// [T/f, in_ch] -> [T, out_ch]
pub fn build_decoder(
    g: &mut Graph,
    params: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    z: NodeId,
    in_ch: usize,
    hidden: usize,
    out_ch: usize,
    factor: usize,
) -> NodeId {
    let mut h = z;
    let mut ch = in_ch;
    for b in 0..blocks_for_factor(factor) {
        h = nn::conv_transpose1d(g, params, rng, &format!("{prefix}.b{b}"), h, ch, hidden, 4, 2, 1);
        h = g.relu(h);
        ch = hidden;
    }
    nn::conv1d(g, params, rng, &format!("{prefix}.out"), h, ch, out_ch, 3, 1, 1)
}
