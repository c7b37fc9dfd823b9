//! Conditional latent diffusion: forward noising, the x0-prediction
//! denoiser with its jointly trained music encoder, and the score algebra
//! connecting x0 predictions to noise estimates.

use std::collections::HashMap;

use duet_core::graph::Feeds;
use duet_core::rng::substream;
use duet_core::{nn, Graph, NodeId, ParamStore, Tensor};
use duet_music::encoder::{build_encoder as build_music_encoder, MusicEncoderConfig};

use crate::bundle::ChannelMap;
use crate::denoiser::{build_denoiser, DenoiserConfig};
use crate::error::{ModelError, Result};
use crate::schedule::NoiseSchedule;

/// Closed-form forward marginal: x_t = sqrt(ab) x0 + sqrt(1 - ab) eps.
pub fn forward_diffuse_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(ModelError::Invalid(format!(
            "x0 {:?} and noise {:?} differ",
            x0.shape(),
            eps.shape()
        )));
    }
    let sa = alpha_bar.sqrt();
    let sb = (1.0 - alpha_bar).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| sa * x + sb * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

pub fn forward_diffuse(x0: &Tensor, eps: &Tensor, schedule: &NoiseSchedule, t: usize) -> Result<Tensor> {
    schedule.check_step(t)?;
    forward_diffuse_with(x0, eps, schedule.alpha_bar(t))
}

/// Invert the forward marginal: eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab).
pub fn epsilon_from_x0_with(x_t: &Tensor, x0_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if alpha_bar >= 1.0 {
        return Err(ModelError::Invalid(
            "epsilon undefined at alpha_bar = 1 (division by zero)".into(),
        ));
    }
    let sa = alpha_bar.sqrt();
    let inv = 1.0 / (1.0 - alpha_bar).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&xt, &x0)| (xt - sa * x0) * inv)
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

pub fn epsilon_from_x0(x_t: &Tensor, x0_hat: &Tensor, schedule: &NoiseSchedule, t: usize) -> Result<Tensor> {
    schedule.check_step(t)?;
    epsilon_from_x0_with(x_t, x0_hat, schedule.alpha_bar(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcdiffConfig {
    pub schedule_name: String,
    pub train_steps: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub timestep_dim: usize,
}

impl Default for RcdiffConfig {
    fn default() -> Self {
        Self {
            schedule_name: "cosine".to_string(),
            train_steps: 1000,
            d_model: 64,
            heads: 4,
            blocks: 2,
            timestep_dim: 32,
        }
    }
}

struct PredictGraph {
    graph: Graph,
    x0_hat: NodeId,
    loss: NodeId,
}

struct MusicGraph {
    graph: Graph,
    out: NodeId,
}

/// The diffusion model: denoiser parameters plus the jointly trained music
/// encoder, specialized per latent length.
pub struct Rcdiff {
    pub cfg: RcdiffConfig,
    pub map: ChannelMap,
    pub denoiser_cfg: DenoiserConfig,
    pub music_cfg: MusicEncoderConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    init_seed: u64,
    predict_graphs: HashMap<usize, PredictGraph>,
    music_graphs: HashMap<usize, MusicGraph>,
}

impl Rcdiff {
    pub fn new(cfg: RcdiffConfig, map: ChannelMap, music_cfg: MusicEncoderConfig, seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::by_name(&cfg.schedule_name, cfg.train_steps)?;
        let denoiser_cfg = DenoiserConfig {
            d_model: cfg.d_model,
            heads: cfg.heads,
            blocks: cfg.blocks,
            timestep_dim: cfg.timestep_dim,
            x_channels: map.state_channels(),
            y_channels: map.condition_channels(),
        };
        let mut model = Self {
            cfg,
            map,
            denoiser_cfg,
            music_cfg,
            schedule,
            params: ParamStore::new(),
            init_seed: seed,
            predict_graphs: HashMap::new(),
            music_graphs: HashMap::new(),
        };
        let f = model.music_cfg.downsample;
        model.ensure_predict_graph(2 * f);
        model.ensure_music_graph(2 * f * f);
        Ok(model)
    }

    /// Load pretrained music-encoder parameters (prefix `music.enc.`).
    pub fn load_music_params(&mut self, params: &ParamStore) {
        self.params.absorb(params);
    }

    fn ensure_predict_graph(&mut self, t_latent: usize) {
        if self.predict_graphs.contains_key(&t_latent) {
            return;
        }
        let mut rng = substream(self.init_seed, "diffusion.init");
        let mut g = Graph::new();
        let x_t = g.input("x_t");
        let y = g.input("y");
        let t_emb = g.input("t_emb");
        let x0 = g.input("x0");
        let x0_hat = build_denoiser(&mut g, &mut self.params, &mut rng, x_t, y, t_emb, t_latent, &self.denoiser_cfg);
        let diff = g.sub(x0_hat, x0);
        let sq = g.square(diff);
        let loss = g.mean_all(sq);
        g.set_label(loss, "diffusion_mse");
        self.predict_graphs.insert(t_latent, PredictGraph { graph: g, x0_hat, loss });
    }

    fn ensure_music_graph(&mut self, t_frames: usize) {
        if self.music_graphs.contains_key(&t_frames) {
            return;
        }
        let mut rng = substream(self.init_seed, "diffusion.music.init");
        let mut g = Graph::new();
        let features = g.input("features");
        let out = build_music_encoder(
            &mut g,
            &mut self.params,
            &mut rng,
            duet_music::encoder::PARAM_PREFIX,
            features,
            t_frames,
            &self.music_cfg,
        );
        self.music_graphs.insert(t_frames, MusicGraph { graph: g, out });
    }

    /// Encode music features [T, C_in] to [T/f, C] with the current
    /// (possibly jointly trained) parameters.
    pub fn encode_music(&mut self, features: &Tensor) -> Result<Tensor> {
        let t = features.shape()[0];
        if t % self.music_cfg.downsample != 0 {
            return Err(ModelError::Invalid(format!(
                "feature length {t} not divisible by downsample {}",
                self.music_cfg.downsample
            )));
        }
        self.ensure_music_graph(t);
        let mg = &self.music_graphs[&t];
        let mut feeds = Feeds::new();
        feeds.insert("features".into(), features.clone());
        Ok(mg.graph.evaluate(&self.params, &feeds, &[mg.out])?.remove(0))
    }

    /// Deterministic forward pass of the denoiser.
    pub fn predict_x0(&mut self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_step(t)?;
        let t_latent = x_t.shape()[0];
        self.ensure_predict_graph(t_latent);
        let pg = &self.predict_graphs[&t_latent];
        let mut feeds = Feeds::new();
        feeds.insert("x_t".into(), x_t.clone());
        feeds.insert("y".into(), y.clone());
        feeds.insert(
            "t_emb".into(),
            nn::timestep_embedding(t, t_latent, self.denoiser_cfg.timestep_dim),
        );
        // the x0 target participates only in the loss path, which the
        // prediction output does not depend on
        feeds.insert("x0".into(), Tensor::zeros(x_t.shape()));
        Ok(pg.graph.evaluate(&self.params, &feeds, &[pg.x0_hat])?.remove(0))
    }

    pub(crate) fn training_graph(&mut self, t_latent: usize) -> (&Graph, NodeId, NodeId) {
        self.ensure_predict_graph(t_latent);
        let pg = &self.predict_graphs[&t_latent];
        (&pg.graph, pg.loss, pg.x0_hat)
    }

    pub fn timestep_embedding(&self, t: usize, t_latent: usize) -> Tensor {
        nn::timestep_embedding(t, t_latent, self.denoiser_cfg.timestep_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use duet_core::rng::normal_tensor;

    #[test]
    fn extreme_alpha_bars_reduce_to_identity_and_pure_noise() {
        let mut rng = substream(0, "diff");
        let x0 = normal_tensor::<f64>(&mut rng, &[4, 6], 1.0);
        let eps = normal_tensor::<f64>(&mut rng, &[4, 6], 1.0);
        let same = forward_diffuse_with(&x0, &eps, 1.0).unwrap();
        assert_eq!(same.data(), x0.data());
        let noise = forward_diffuse_with(&x0, &eps, 0.0).unwrap();
        assert_eq!(noise.data(), eps.data());
    }

    #[test]
    fn epsilon_round_trip_is_exact_to_1e12() {
        let mut rng = substream(1, "diff");
        let schedule = NoiseSchedule::cosine(100);
        let x0 = normal_tensor::<f64>(&mut rng, &[5, 8], 1.0);
        for t in [1, 25, 50, 99, 100] {
            let eps = normal_tensor::<f64>(&mut rng, &[5, 8], 1.0);
            let x_t = forward_diffuse(&x0, &eps, &schedule, t).unwrap();
            let back = epsilon_from_x0(&x_t, &x0, &schedule, t).unwrap();
            for (a, b) in back.data().iter().zip(eps.data()) {
                assert!((a - b).abs() <= 1e-12, "t={t}: {a} vs {b}");
            }
            // reconstruction identity in the other direction
            let rebuilt = forward_diffuse(&x0, &back, &schedule, t).unwrap();
            for (a, b) in rebuilt.data().iter().zip(x_t.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn epsilon_rejects_alpha_bar_one() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(epsilon_from_x0_with(&x, &x, 1.0).is_err());
    }

    #[test]
    fn out_of_range_timesteps_rejected() {
        let schedule = NoiseSchedule::cosine(10);
        let x = Tensor::zeros(&[2, 2]);
        assert!(forward_diffuse(&x, &x, &schedule, 0).is_err());
        assert!(forward_diffuse(&x, &x, &schedule, 11).is_err());
    }

    #[test]
    fn forward_marginal_statistics_match_closed_form() {
        // Monte-Carlo oracle: over many draws the sample mean approaches
        // sqrt(ab) x0 and the variance approaches 1 - ab
        let schedule = NoiseSchedule::cosine(1000);
        let x0 = Tensor::full(&[1, 4], 1.5);
        let mut rng = substream(2, "diff.mc");
        for t in [1, 250, 500, 750, 1000] {
            let ab = schedule.alpha_bar(t);
            let n = 10_000;
            // every channel shares the same x0 value, so the four channels
            // pool into one 40k-draw estimate of the common marginal
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let eps = normal_tensor::<f64>(&mut rng, &[1, 4], 1.0);
                let x_t = forward_diffuse(&x0, &eps, &schedule, t).unwrap();
                for &v in x_t.data() {
                    sum += v;
                    sumsq += v * v;
                }
            }
            let count = (n * 4) as f64;
            let mean = sum / count;
            let var = sumsq / count - mean * mean;
            let want_mean = ab.sqrt() * 1.5;
            let want_var = 1.0 - ab;
            // 2% of the marginal's own scale (std floor covers the
            // near-zero-mean regime at large t)
            let mean_tol = 0.02 * want_mean.abs().max(want_var.sqrt()).max(0.01);
            let var_tol = 0.02 * want_var.max(0.01);
            assert!((mean - want_mean).abs() <= mean_tol, "t={t} mean {mean} vs {want_mean}");
            assert!((var - want_var).abs() <= var_tol, "t={t} var {var} vs {want_var}");
        }
    }

    #[test]
    fn predict_x0_is_deterministic_with_matching_shape() {
        let map = ChannelMap::new(&["U", "D"], 4);
        let music_cfg = MusicEncoderConfig {
            input_channels: 54,
            model_dim: 4,
            heads: 2,
            blocks: 1,
            downsample: 4,
        };
        let mut model = Rcdiff::new(
            RcdiffConfig {
                d_model: 16,
                heads: 2,
                blocks: 1,
                timestep_dim: 8,
                train_steps: 50,
                ..RcdiffConfig::default()
            },
            map,
            music_cfg,
            7,
        )
        .unwrap();
        let mut rng = substream(3, "diff");
        let x_t = normal_tensor::<f64>(&mut rng, &[6, 16], 1.0);
        let y = normal_tensor::<f64>(&mut rng, &[6, 12], 1.0);
        let a = model.predict_x0(&x_t, &y, 10).unwrap();
        let b = model.predict_x0(&x_t, &y, 10).unwrap();
        assert_eq!(a.shape(), x_t.shape());
        assert_eq!(a, b);
    }
}
