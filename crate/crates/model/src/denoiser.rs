//! The transformer denoiser: predicts the clean latent state from the
//! noisy state, the condition, and a timestep embedding.

use duet_core::rng::ChaCha12Rng;
use duet_core::{nn, Graph, NodeId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub timestep_dim: usize,
    pub x_channels: usize,
    pub y_channels: usize,
}

impl DenoiserConfig {
    pub fn for_channels(x_channels: usize, y_channels: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            timestep_dim: 32,
            x_channels,
            y_channels,
        }
    }
}

pub const PARAM_PREFIX: &str = "denoiser";

/// Wire the x0-prediction network: concat(x_t, y, t_emb) -> projection ->
/// positional encoding -> transformer blocks -> output projection.
pub fn build_denoiser(
    g: &mut Graph,
    params: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    x_t: NodeId,
    y: NodeId,
    t_emb: NodeId,
    t_len: usize,
    cfg: &DenoiserConfig,
) -> NodeId {
    let d = cfg.d_model;
    let in_ch = cfg.x_channels + cfg.y_channels + cfg.timestep_dim;
    let cat = g.concat(vec![x_t, y, t_emb], 1);
    let proj = nn::linear(g, params, rng, &format!("{PARAM_PREFIX}.in"), cat, in_ch, d);
    let pe = g.constant(nn::sinusoidal_encoding::<f64>(t_len, d));
    let mut h = g.add(proj, pe);
    for b in 0..cfg.blocks {
        h = nn::transformer_block(g, params, rng, &format!("{PARAM_PREFIX}.blk{b}"), h, d, cfg.heads, 4);
    }
    let hn = nn::layer_norm(g, params, &format!("{PARAM_PREFIX}.ln_f"), h, d);
    nn::linear(g, params, rng, &format!("{PARAM_PREFIX}.out"), hn, d, cfg.x_channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use duet_core::graph::Feeds;
    use duet_core::rng::{normal_tensor, substream};
    use duet_core::Tensor;

    #[test]
    fn output_shape_matches_state_and_calls_are_deterministic() {
        let cfg = DenoiserConfig::for_channels(12, 10);
        let mut g = Graph::new();
        let mut params = ParamStore::new();
        let mut rng = substream(0, "den");
        let x = g.input("x");
        let y = g.input("y");
        let t = g.input("t");
        let out = build_denoiser(&mut g, &mut params, &mut rng, x, y, t, 6, &cfg);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), normal_tensor(&mut rng, &[6, 12], 1.0));
        feeds.insert("y".into(), normal_tensor(&mut rng, &[6, 10], 1.0));
        feeds.insert("t".into(), nn::timestep_embedding(5, 6, 32));
        let a = g.evaluate(&params, &feeds, &[out]).unwrap();
        assert_eq!(a[0].shape(), &[6, 12]);
        let b = g.evaluate(&params, &feeds, &[out]).unwrap();
        assert_eq!(a[0], b[0]);
        let _ = Tensor::zeros(&[1]);
    }

    #[test]
    fn gradient_wrt_noisy_state_matches_finite_differences() {
        use duet_core::graph::Wrt;
        let cfg = DenoiserConfig::for_channels(6, 4);
        let mut g = Graph::new();
        let mut params = ParamStore::new();
        let mut rng = substream(1, "den");
        let x = g.input("x");
        let y = g.input("y");
        let t = g.input("t");
        let out = build_denoiser(&mut g, &mut params, &mut rng, x, y, t, 4, &cfg);
        let w = g.constant(normal_tensor(&mut rng, &[4, 6], 1.0));
        let prod = g.mul(out, w);
        let loss = g.sum_all(prod);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), normal_tensor(&mut rng, &[4, 6], 1.0));
        feeds.insert("y".into(), normal_tensor(&mut rng, &[4, 4], 1.0));
        feeds.insert("t".into(), nn::timestep_embedding(3, 4, 32));
        let report = g
            .finite_diff_check(&mut params, &feeds, loss, &[Wrt::Input("x".into())], 1e-5)
            .unwrap();
        assert!(report["x"] <= 1e-4, "rel err {}", report["x"]);
    }
}
