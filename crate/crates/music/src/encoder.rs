//! Transformer music encoder: linear projection + positional encoding +
//! transformer blocks + strided downsampling to the latent frame rate.

use std::collections::HashMap;

use duet_core::graph::Feeds;
use duet_core::rng::substream;
use duet_core::{nn, Graph, NodeId, ParamStore, Tensor};

use crate::error::{MusicError, Result};
use crate::features::CHANNELS;

#[derive(Debug, Clone, PartialEq)]
pub struct MusicEncoderConfig {
    pub input_channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Temporal downsampling factor; output length is T / downsample.
    pub downsample: usize,
}

impl Default for MusicEncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: CHANNELS,
            model_dim: 32,
            heads: 4,
            blocks: 2,
            downsample: 4,
        }
    }
}

/// Wire the encoder into `g` under `prefix`, returning the [T/f, C] output.
/// Creates parameters on first use; reuses them afterwards.
pub fn build_encoder(
    g: &mut Graph,
    params: &mut ParamStore,
    rng: &mut duet_core::rng::ChaCha12Rng,
    prefix: &str,
    x: NodeId,
    t_len: usize,
    cfg: &MusicEncoderConfig,
) -> NodeId {
    let d = cfg.model_dim;
    let proj = nn::linear(g, params, rng, &format!("{prefix}.proj"), x, cfg.input_channels, d);
    let pe = g.constant(nn::sinusoidal_encoding::<f64>(t_len, d));
    let mut h = g.add(proj, pe);
    for b in 0..cfg.blocks {
        h = nn::transformer_block(g, params, rng, &format!("{prefix}.blk{b}"), h, d, cfg.heads, 4);
    }
    nn::conv1d(
        g,
        params,
        rng,
        &format!("{prefix}.down"),
        h,
        d,
        d,
        cfg.downsample,
        cfg.downsample,
        0,
    )
}

/// Decoder head used only for feature-reconstruction pretraining.
pub fn build_reconstruction_head(
    g: &mut Graph,
    params: &mut ParamStore,
    rng: &mut duet_core::rng::ChaCha12Rng,
    prefix: &str,
    encoded: NodeId,
    cfg: &MusicEncoderConfig,
) -> NodeId {
    let d = cfg.model_dim;
    let up = nn::conv_transpose1d(
        g,
        params,
        rng,
        &format!("{prefix}.up"),
        encoded,
        d,
        d,
        cfg.downsample,
        cfg.downsample,
        0,
    );
    let act = g.gelu(up);
    nn::linear(g, params, rng, &format!("{prefix}.out"), act, d, cfg.input_channels)
}

struct EncGraph {
    graph: Graph,
    output: NodeId,
}

/// Standalone encoder owning its parameters; graphs are specialized per
/// input length and cached.
pub struct MusicEncoder {
    pub cfg: MusicEncoderConfig,
    pub params: ParamStore,
    graphs: HashMap<usize, EncGraph>,
    init_seed: u64,
}

pub const PARAM_PREFIX: &str = "music.enc";

impl MusicEncoder {
    pub fn new(cfg: MusicEncoderConfig, seed: u64) -> Self {
        let mut enc = Self {
            cfg,
            params: ParamStore::new(),
            graphs: HashMap::new(),
            init_seed: seed,
        };
        // materialize all parameters immediately so later graph builds for
        // other lengths never touch the init stream
        enc.ensure_graph(enc.cfg.downsample * 2);
        enc
    }

    /// Replace parameters (e.g. from a checkpoint).
    pub fn load_params(&mut self, params: &ParamStore) {
        self.params.absorb(params);
    }

    fn ensure_graph(&mut self, t_len: usize) {
        if self.graphs.contains_key(&t_len) {
            return;
        }
        let mut rng = substream(self.init_seed, "music.init");
        let mut g = Graph::new();
        let x = g.input("features");
        let out = build_encoder(&mut g, &mut self.params, &mut rng, PARAM_PREFIX, x, t_len, &self.cfg);
        g.set_output("encoded", out);
        self.graphs.insert(t_len, EncGraph { graph: g, output: out });
    }

    /// Encode [T, C_in] features to [ceil(T/f), model_dim]. Inputs whose
    /// length is not a multiple of the downsample factor are zero-padded.
    pub fn encode(&mut self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.shape()[1] != self.cfg.input_channels {
            return Err(MusicError::Invalid(format!(
                "expected [T, {}] features, got {:?}",
                self.cfg.input_channels,
                features.shape()
            )));
        }
        let t = features.shape()[0];
        let f = self.cfg.downsample;
        let padded_t = t.div_ceil(f) * f;
        let padded = if padded_t == t {
            features.clone()
        } else {
            let mut data = features.data().to_vec();
            data.resize(padded_t * self.cfg.input_channels, 0.0);
            Tensor::new(vec![padded_t, self.cfg.input_channels], data).map_err(MusicError::Core)?
        };
        self.ensure_graph(padded_t);
        let eg = &self.graphs[&padded_t];
        let mut feeds = Feeds::new();
        feeds.insert("features".into(), padded);
        let out = eg
            .graph
            .evaluate(&self.params, &feeds, &[eg.output])
            .map_err(MusicError::Core)?;
        Ok(out.into_iter().next().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_contract_holds_for_valid_t() {
        let mut enc = MusicEncoder::new(MusicEncoderConfig::default(), 0);
        for t in [4, 8, 32, 64] {
            let x = Tensor::zeros(&[t, CHANNELS]);
            let y = enc.encode(&x).unwrap();
            assert_eq!(y.shape(), &[t / 4, 32]);
        }
        // non-multiple lengths pad up
        let y = enc.encode(&Tensor::zeros(&[10, CHANNELS])).unwrap();
        assert_eq!(y.shape(), &[3, 32]);
    }

    #[test]
    fn zero_features_with_zero_projection_still_activate() {
        let mut enc = MusicEncoder::new(MusicEncoderConfig::default(), 1);
        for name in ["music.enc.proj.w", "music.enc.proj.b"] {
            let shape = enc.params.get(name).unwrap().shape().to_vec();
            enc.params.set(name, Tensor::zeros(&shape));
        }
        let x = Tensor::zeros(&[16, CHANNELS]);
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x).unwrap();
        // positional encoding alone drives the activations
        assert!(a.data().iter().any(|&v| v != 0.0));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn permuting_time_frames_changes_the_output() {
        let mut enc = MusicEncoder::new(MusicEncoderConfig::default(), 2);
        let mut rng = substream(9, "probe");
        let x = duet_core::rng::normal_tensor::<f64>(&mut rng, &[16, CHANNELS], 1.0);
        let y = enc.encode(&x).unwrap();
        // swap two frames
        let mut data = x.data().to_vec();
        for c in 0..CHANNELS {
            data.swap(c, CHANNELS + c);
        }
        let xp = Tensor::new(vec![16, CHANNELS], data).unwrap();
        let yp = enc.encode(&xp).unwrap();
        let delta: f64 = y
            .data()
            .iter()
            .zip(yp.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 1e-9, "positional encoding should break permutation invariance");
    }
}
