//! Deterministic DDIM sampling with contact-guided score correction, and
//! the frozen-pipeline plumbing that encodes conditions and decodes the
//! sampled latents back into follower motion.

use std::collections::HashMap;

use duet_core::graph::{Feeds, Wrt};
use duet_core::rng::{normal_tensor, substream};
use duet_core::{Graph, NodeId, ParamStore, Tensor};

use duet_motion::skeleton::{Skeleton, REDUCED_JOINT_COUNT};
use duet_motion::{ContactMatrix, DuetSample, MotionSequence};

use crate::auxvq::{ContactVq, TrajectoryVq, CONTACT_CHANNELS};
use crate::bundle::{ChannelMap, ConditionBundle, LatentBundle};
use crate::denoiser::build_denoiser;
use crate::diffusion::{epsilon_from_x0_with, Rcdiff};
use crate::error::{ModelError, Result};
use crate::backbone;
use crate::partfusion::{wire_decoder, PartFusionVq, POS_CHANNELS};
use crate::quantize::wire_quantizer;
use crate::schedule::NoiseSchedule;

const GUIDANCE_EPS: f64 = 1e-8;

/// Everything the sampler needs, with every network frozen.
pub struct FrozenPipeline {
    pub partfusion: PartFusionVq,
    pub trajectory: TrajectoryVq,
    pub contact: ContactVq,
    pub rcdiff: Rcdiff,
}

impl FrozenPipeline {
    pub fn channel_map(&self) -> ChannelMap {
        self.rcdiff.map.clone()
    }

    /// Pre-quantization state bundle of a ground-truth duet.
    pub fn encode_state(&mut self, duet: &DuetSample) -> Result<LatentBundle> {
        let targets = self.partfusion.targets_from_motion(&duet.follower);
        let codes = self.partfusion.encode(&targets)?;
        let parts: Vec<Tensor> = codes.into_iter().map(|c| c.pre_quant).collect();
        let traj_in = Tensor::new(vec![duet.frames(), 3], duet.trajectory.offsets.clone())?;
        let z_d = self.trajectory.encode(&traj_in)?.pre_quant;
        let z_c = self.contact.encode(&duet.contacts.to_tensor())?.pre_quant;
        LatentBundle::concat(self.channel_map(), &parts, &z_d, &z_c)
    }

    /// Condition bundle: leader part latents plus encoded music features.
    pub fn encode_condition(&mut self, leader: &MotionSequence, features: &Tensor) -> Result<ConditionBundle> {
        let targets = self.partfusion.targets_from_motion(leader);
        let codes = self.partfusion.encode(&targets)?;
        let parts: Vec<Tensor> = codes.into_iter().map(|c| c.pre_quant).collect();
        let f_a = self.rcdiff.encode_music(features)?;
        ConditionBundle::concat(self.channel_map(), &parts, &f_a)
    }

    /// Decode a latent bundle into follower motion and its contact matrix.
    /// The follower's global placement is leader root + decoded offsets.
    pub fn decode_follower(
        &mut self,
        bundle: &LatentBundle,
        leader: &MotionSequence,
        quantize_first: bool,
    ) -> Result<(MotionSequence, ContactMatrix)> {
        let map = &bundle.map;
        let parts: Vec<Tensor> = (0..map.parts()).map(|i| bundle.motion_part(i)).collect();
        let (pos, rot, _vel) = self.partfusion.decode(&parts, quantize_first)?;
        let offsets = self.trajectory.decode(&bundle.trajectory(), quantize_first)?;
        let (_probs, mask) = self.contact.decode_contact(&bundle.contact(), quantize_first)?;
        let frames = pos.shape()[0];
        if leader.frames != frames {
            return Err(ModelError::Invalid(format!(
                "decoded {frames} frames but leader has {}",
                leader.frames
            )));
        }
        let joints = POS_CHANNELS / 3;
        let mut follower = MotionSequence::zeros(frames, leader.fps, joints);
        for t in 0..frames {
            let row = &pos.data()[t * POS_CHANNELS..(t + 1) * POS_CHANNELS];
            // recenter so the root entry is exactly zero, compensating in
            // the translation; global positions are unchanged
            let root = [row[0], row[1], row[2]];
            for j in 0..joints {
                follower.set_local_pos(
                    t,
                    j,
                    [
                        row[j * 3] - root[0],
                        row[j * 3 + 1] - root[1],
                        row[j * 3 + 2] - root[2],
                    ],
                );
            }
            let lr = leader.root(t);
            follower.set_root(
                t,
                [
                    lr[0] + offsets.data()[t * 3] + root[0],
                    lr[1] + offsets.data()[t * 3 + 1] + root[1],
                    lr[2] + offsets.data()[t * 3 + 2] + root[2],
                ],
            );
        }
        follower.rotations = rot.data().to_vec();
        let contacts = ContactMatrix {
            frames,
            entries: mask,
        };
        Ok((follower, contacts))
    }

    /// Contact consistency loss of a clean latent state against the leader:
    /// decode, place globally, and average squared distances over the
    /// predicted contact pairs.
    pub fn contact_guidance_loss(&mut self, x0: &LatentBundle, leader: &MotionSequence) -> Result<f64> {
        let (follower, contacts) = self.decode_follower(x0, leader, true)?;
        let sk = Skeleton::duet54();
        let frames = follower.frames;
        let mut follower_red = Vec::with_capacity(frames * REDUCED_JOINT_COUNT * 3);
        let mut leader_red = Vec::with_capacity(frames * REDUCED_JOINT_COUNT * 3);
        for t in 0..frames {
            follower_red.extend(follower.reduced_global_frame(sk, t));
            leader_red.extend(leader.reduced_global_frame(sk, t));
        }
        Ok(contact_consistency_loss(&follower_red, &leader_red, &contacts.entries))
    }
}

/// Sum of squared pair distances weighted by the binary mask, normalized
/// by the contact count plus a small epsilon.
pub fn contact_consistency_loss(follower_red: &[f64], leader_red: &[f64], mask: &[u8]) -> f64 {
    let frames = mask.len() / (REDUCED_JOINT_COUNT * REDUCED_JOINT_COUNT);
    let mut num = 0.0;
    let mut count = 0.0;
    for t in 0..frames {
        for i in 0..REDUCED_JOINT_COUNT {
            for j in 0..REDUCED_JOINT_COUNT {
                let m = mask[(t * REDUCED_JOINT_COUNT + i) * REDUCED_JOINT_COUNT + j];
                if m == 0 {
                    continue;
                }
                let fo = (t * REDUCED_JOINT_COUNT + i) * 3;
                let lo = (t * REDUCED_JOINT_COUNT + j) * 3;
                let mut d2 = 0.0;
                for d in 0..3 {
                    let diff = follower_red[fo + d] - leader_red[lo + d];
                    d2 += diff * diff;
                }
                num += d2;
                count += 1.0;
            }
        }
    }
    num / (count + GUIDANCE_EPS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub lambda_c: f64,
    pub guidance: bool,
    pub gradient_clip: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lambda_c: 0.1,
            guidance: true,
            gradient_clip: 1.0,
        }
    }
}

pub struct SampleOutput {
    pub bundle: LatentBundle,
    /// Contact-consistency loss per guided step (empty when unguided).
    pub guidance_trace: Vec<f64>,
}

struct GuidedGraph {
    graph: Graph,
    x0_hat: NodeId,
    loss: NodeId,
}

/// DDIM sampler (eta = 0) over a uniformly strided timestep subsequence.
pub struct Sampler {
    pub cfg: SamplerConfig,
    map: ChannelMap,
    /// Denoiser + every frozen decoder, merged into one store.
    merged: ParamStore,
    guided_graphs: HashMap<usize, GuidedGraph>,
    sk: &'static Skeleton,
}

impl Sampler {
    pub fn new(pipeline: &FrozenPipeline, cfg: SamplerConfig) -> Self {
        let mut merged = ParamStore::new();
        merged.absorb(&pipeline.rcdiff.params);
        merged.absorb(&pipeline.partfusion.params);
        merged.absorb(&pipeline.trajectory.params);
        merged.absorb(&pipeline.contact.params);
        Self {
            cfg,
            map: pipeline.channel_map(),
            merged,
            guided_graphs: HashMap::new(),
            sk: Skeleton::duet54(),
        }
    }

    /// The uniformly strided timestep subsequence, ascending.
    fn timesteps(&self, train_steps: usize) -> Vec<usize> {
        let s = self.cfg.steps.min(train_steps).max(1);
        (1..=s).map(|k| k * train_steps / s).collect()
    }

    /// Constant [162, 69] matrix averaging full-body position channels
    /// into the reduced 23-joint layout.
    fn reduction_matrix(&self) -> Tensor {
        let mut data = vec![0.0; POS_CHANNELS * REDUCED_JOINT_COUNT * 3];
        for (red, sources) in self.sk.reduced_sources().iter().enumerate() {
            let w = 1.0 / sources.len() as f64;
            for &j in sources {
                for d in 0..3 {
                    let row = j * 3 + d;
                    let col = red * 3 + d;
                    data[row * REDUCED_JOINT_COUNT * 3 + col] = w;
                }
            }
        }
        Tensor::new(vec![POS_CHANNELS, REDUCED_JOINT_COUNT * 3], data).expect("reduction shape")
    }

    fn ensure_guided_graph(&mut self, pipeline: &FrozenPipeline, t_latent: usize) {
        if self.guided_graphs.contains_key(&t_latent) {
            return;
        }
        // params already exist in the merged store, so the rng is never
        // consulted; any fixed seed keeps construction deterministic
        let mut rng = substream(0, "sampler.build");
        let mut graph = Graph::new();
        let g = &mut graph;
        let x_t = g.input("x_t");
        let y = g.input("y");
        let t_emb = g.input("t_emb");
        let leader_red = g.input("leader_red");
        let leader_root = g.input("leader_root");
        let x0_hat = build_denoiser(
            g,
            &mut self.merged,
            &mut rng,
            x_t,
            y,
            t_emb,
            t_latent,
            &pipeline.rcdiff.denoiser_cfg,
        );

        // split the predicted state into its components
        let mut part_latents = Vec::new();
        for p in 0..self.map.parts() {
            let r = self.map.part_range(p);
            part_latents.push(g.slice(x0_hat, 1, r.start, r.end));
        }
        let tr = self.map.trajectory_range();
        let z_d = g.slice(x0_hat, 1, tr.start, tr.end);
        let cr = self.map.contact_range();
        let z_c = g.slice(x0_hat, 1, cr.start, cr.end);

        // straight-through quantization keeps the decode path differentiable
        let pf_cfg = &pipeline.partfusion.cfg;
        let quantized: Vec<NodeId> = pipeline
            .partfusion
            .parts()
            .iter()
            .zip(&part_latents)
            .map(|(def, &z)| {
                let cb = g.param(&format!("vq.cb.{}", def.name));
                wire_quantizer(g, z, cb).z_st
            })
            .collect();
        let dec = wire_decoder(
            pf_cfg,
            pipeline.partfusion.parts(),
            g,
            &mut self.merged,
            &mut rng,
            &quantized,
        );
        let traj_cb = g.param("traj.cb");
        let z_d_q = wire_quantizer(g, z_d, traj_cb).z_st;
        let t_cfg = &pipeline.trajectory.cfg;
        let offsets = backbone::build_decoder(
            g,
            &mut self.merged,
            &mut rng,
            "traj.dec",
            z_d_q,
            t_cfg.latent_dim,
            t_cfg.hidden,
            3,
            t_cfg.downsample,
        );
        let contact_cb = g.param("contact.cb");
        let z_c_q = wire_quantizer(g, z_c, contact_cb).z_st;
        let c_cfg = &pipeline.contact.cfg;
        let logits = backbone::build_decoder(
            g,
            &mut self.merged,
            &mut rng,
            "contact.dec",
            z_c_q,
            c_cfg.latent_dim,
            c_cfg.hidden,
            CONTACT_CHANNELS,
            c_cfg.downsample,
        );

        // follower joints in global space, reduced to the 23-joint layout
        let red = g.constant(self.reduction_matrix());
        let pos_red = g.matmul(dec.positions, red);
        let follower_root = g.add(leader_root, offsets);
        let pos3 = g.reshape(pos_red, vec![-1, REDUCED_JOINT_COUNT as i64, 3]);
        let root3 = g.reshape(follower_root, vec![-1, 1, 3]);
        let follower_global = g.add(pos3, root3);
        let pf = g.reshape(follower_global, vec![-1, REDUCED_JOINT_COUNT as i64, 1, 3]);
        let pl = g.reshape(leader_red, vec![-1, 1, REDUCED_JOINT_COUNT as i64, 3]);
        let diff = g.sub(pf, pl);
        let sq = g.square(diff);
        let dist2 = g.sum_axis(sq, 3);

        // binary mask from the decoded contact logits, gradient-blocked
        let probs = g.sigmoid(logits);
        let mask_flat = g.greater_than(probs, c_cfg.mask_threshold);
        let mask3 = g.reshape(mask_flat, vec![-1, REDUCED_JOINT_COUNT as i64, REDUCED_JOINT_COUNT as i64]);
        let mask = g.stop_gradient(mask3);
        let weighted = g.mul(dist2, mask);
        let num = g.sum_all(weighted);
        let count = g.sum_all(mask);
        let den = g.add_scalar(count, GUIDANCE_EPS);
        let loss = g.div(num, den);
        g.set_label(loss, "contact_guidance_loss");

        self.guided_graphs.insert(t_latent, GuidedGraph { graph, x0_hat, loss });
    }

    /// Run the unguided DDIM loop with a caller-supplied x0 predictor.
    /// This is the exact code path `sample` takes when guidance is off.
    pub fn sample_with<F>(
        &self,
        schedule: &NoiseSchedule,
        mut predict: F,
        shape: &[usize],
        seed: u64,
    ) -> Result<Tensor>
    where
        F: FnMut(&Tensor, usize) -> Result<Tensor>,
    {
        let mut rng = substream(seed, "sampler.noise");
        let mut x: Tensor = normal_tensor(&mut rng, shape, 1.0);
        let taus = self.timesteps(schedule.steps());
        for k in (0..taus.len()).rev() {
            let t = taus[k];
            let t_prev = if k > 0 { taus[k - 1] } else { 0 };
            let x0_hat = predict(&x, t)?;
            let eps = epsilon_from_x0_with(&x, &x0_hat, schedule.alpha_bar(t))?;
            x = ddim_step(&x0_hat, &eps, schedule.alpha_bar(t_prev))?;
        }
        Ok(x)
    }

    /// Full guided sampling against the frozen pipeline.
    pub fn sample(
        &mut self,
        pipeline: &mut FrozenPipeline,
        condition: &ConditionBundle,
        leader: &MotionSequence,
        seed: u64,
    ) -> Result<SampleOutput> {
        let t_latent = condition.frames();
        let shape = [t_latent, self.map.state_channels()];
        let schedule = pipeline.rcdiff.schedule.clone();
        let guided = self.cfg.guidance && self.cfg.lambda_c > 0.0;
        let mut trace = Vec::new();

        if !guided {
            // unguided path: plain denoiser evaluations only; bit-identical
            // to a build without any guidance code
            let y = condition.y.clone();
            let x = self.sample_with(
                &schedule,
                |x_t, t| pipeline.rcdiff.predict_x0(x_t, &y, t),
                &shape,
                seed,
            )?;
            return Ok(SampleOutput {
                bundle: LatentBundle::from_tensor(self.map.clone(), x)?,
                guidance_trace: trace,
            });
        }

        self.ensure_guided_graph(pipeline, t_latent);
        let frames = t_latent * pipeline.partfusion.cfg.downsample;
        if leader.frames != frames {
            return Err(ModelError::Invalid(format!(
                "leader has {} frames, sampler expects {frames}",
                leader.frames
            )));
        }
        let sk = self.sk;
        let mut leader_red = Vec::with_capacity(frames * REDUCED_JOINT_COUNT * 3);
        for t in 0..frames {
            leader_red.extend(leader.reduced_global_frame(sk, t));
        }
        let leader_red = Tensor::new(vec![frames, REDUCED_JOINT_COUNT * 3], leader_red)?;
        let leader_root = Tensor::new(vec![frames, 3], leader.root_translation.clone())?;

        let gg = &self.guided_graphs[&t_latent];
        let mut rng = substream(seed, "sampler.noise");
        let mut x: Tensor = normal_tensor(&mut rng, &shape, 1.0);
        let taus = self.timesteps(schedule.steps());
        let temb_dim = pipeline.rcdiff.denoiser_cfg.timestep_dim;
        for k in (0..taus.len()).rev() {
            let t = taus[k];
            let t_prev = if k > 0 { taus[k - 1] } else { 0 };
            let mut feeds = Feeds::new();
            feeds.insert("x_t".into(), x.clone());
            feeds.insert("y".into(), condition.y.clone());
            feeds.insert("t_emb".into(), duet_core::nn::timestep_embedding(t, t_latent, temb_dim));
            feeds.insert("leader_red".into(), leader_red.clone());
            feeds.insert("leader_root".into(), leader_root.clone());
            let res = gg.graph.gradients(
                &self.merged,
                &feeds,
                gg.loss,
                &[Wrt::Input("x_t".into())],
                &[gg.x0_hat],
            )?;
            let x0_hat = res.outputs[0].clone();
            let mut grad = res.grads["x_t"].clone();
            sanitize_gradient(&mut grad, self.cfg.gradient_clip);
            trace.push(res.loss);

            let ab_t = schedule.alpha_bar(t);
            let ab_prev = schedule.alpha_bar(t_prev);
            let eps = epsilon_from_x0_with(&x, &x0_hat, ab_t)?;
            // score correction: score' = score - lambda * grad, i.e.
            // eps' = eps + sqrt(1 - ab) * lambda * grad
            let lam = self.cfg.lambda_c;
            let s1m = (1.0 - ab_t).sqrt();
            let eps_data: Vec<f64> = eps
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&e, &g)| e + s1m * lam * g)
                .collect();
            let eps_guided = Tensor::new(eps.shape().to_vec(), eps_data)?;
            // recompute the clean estimate from the corrected noise
            let sa = ab_t.sqrt();
            let x0_data: Vec<f64> = x
                .data()
                .iter()
                .zip(eps_guided.data())
                .map(|(&xt, &e)| (xt - s1m * e) / sa)
                .collect();
            let x0_guided = Tensor::new(x.shape().to_vec(), x0_data)?;
            x = ddim_step(&x0_guided, &eps_guided, ab_prev)?;
        }
        Ok(SampleOutput {
            bundle: LatentBundle::from_tensor(self.map.clone(), x)?,
            guidance_trace: trace,
        })
    }

    /// Evaluate the guidance loss and its value through the graph for a
    /// given noisy state (testing and trace replay).
    pub fn guidance_loss_at(
        &mut self,
        pipeline: &mut FrozenPipeline,
        x_t: &Tensor,
        condition: &ConditionBundle,
        leader: &MotionSequence,
        t: usize,
    ) -> Result<(f64, Tensor)> {
        let t_latent = x_t.shape()[0];
        self.ensure_guided_graph(pipeline, t_latent);
        let frames = t_latent * pipeline.partfusion.cfg.downsample;
        let sk = self.sk;
        let mut leader_red = Vec::with_capacity(frames * REDUCED_JOINT_COUNT * 3);
        for ti in 0..frames {
            leader_red.extend(leader.reduced_global_frame(sk, ti));
        }
        let gg = &self.guided_graphs[&t_latent];
        let mut feeds = Feeds::new();
        feeds.insert("x_t".into(), x_t.clone());
        feeds.insert("y".into(), condition.y.clone());
        feeds.insert(
            "t_emb".into(),
            duet_core::nn::timestep_embedding(t, t_latent, pipeline.rcdiff.denoiser_cfg.timestep_dim),
        );
        feeds.insert("leader_red".into(), Tensor::new(vec![frames, REDUCED_JOINT_COUNT * 3], leader_red)?);
        feeds.insert("leader_root".into(), Tensor::new(vec![frames, 3], leader.root_translation.clone())?);
        let res = gg.graph.gradients(
            &self.merged,
            &feeds,
            gg.loss,
            &[Wrt::Input("x_t".into())],
            &[],
        )?;
        Ok((res.loss, res.grads["x_t"].clone()))
    }
}

/// One DDIM update (eta = 0): x_prev = sqrt(ab_prev) x0 + sqrt(1-ab_prev) eps.
fn ddim_step(x0_hat: &Tensor, eps: &Tensor, alpha_bar_prev: f64) -> Result<Tensor> {
    let sa = alpha_bar_prev.sqrt();
    let sb = (1.0 - alpha_bar_prev).sqrt();
    let data = x0_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x0, &e)| sa * x0 + sb * e)
        .collect();
    Ok(Tensor::new(x0_hat.shape().to_vec(), data)?)
}

/// Zero non-finite entries (with a warning) and clip to a norm budget.
fn sanitize_gradient(grad: &mut Tensor, clip: f64) {
    let mut bad = 0usize;
    for v in grad.data_mut() {
        if !v.is_finite() {
            *v = 0.0;
            bad += 1;
        }
    }
    if bad > 0 {
        log::warn!("guidance gradient had {bad} non-finite entries; zeroed before clipping");
    }
    if clip > 0.0 {
        let norm: f64 = grad.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
            for v in grad.data_mut() {
                *v *= s;
            }
        }
    }
}
