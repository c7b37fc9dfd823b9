//! Training loops for every stage. Batches fan out across items in
//! parallel and reduce in a fixed order, so runs replay bitwise from the
//! seed.

use std::collections::BTreeMap;

use rayon::prelude::*;

use duet_core::graph::{Feeds, GradResult, Wrt};
use duet_core::optim::AdamBase;
use duet_core::rng::{shuffled_indices, substream};
use duet_core::{Graph, NodeId, Tensor};

use duet_motion::DuetSample;

use crate::auxvq::{ContactVq, TrajectoryVq};
use crate::bundle::{ChannelMap, ConditionBundle, LatentBundle};
use crate::diffusion::{forward_diffuse, Rcdiff};
use crate::error::{ModelError, Result};
use crate::partfusion::{MotionTargets, PartFusionVq};
use crate::quantize::utilization;
use crate::sampler::FrozenPipeline;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    /// 0 means one pass over the dataset per epoch.
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by the
    /// decay factor.
    pub lr_decay_at: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainSettings {
    /// Adam defaults used by the VQ stages.
    pub fn vq_defaults(seed: u64) -> Self {
        Self {
            epochs: 200,
            iterations_per_epoch: 200,
            batch_size: 16,
            learning_rate: 3e-4,
            lr_decay_factor: 0.1,
            lr_decay_at: vec![100, 160],
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 0.0,
            seed,
        }
    }

    /// AdamW defaults used by the diffusion stage.
    pub fn diffusion_defaults(seed: u64) -> Self {
        Self {
            epochs: 100,
            iterations_per_epoch: 0,
            batch_size: 8,
            learning_rate: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_at: vec![],
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    /// Fraction of codebook entries used during the epoch, one per codebook.
    pub codebook_utilization: Vec<f64>,
}

fn current_lr(base: f64, factor: f64, decay_at: &[usize], epoch: usize) -> f64 {
    let hits = decay_at.iter().filter(|&&e| epoch >= e).count();
    base * factor.powi(hits as i32)
}

/// Deterministic batch gradient: items evaluated in parallel, reduced in
/// index order, averaged by batch size.
fn batch_gradients(
    graph: &Graph,
    params: &duet_core::ParamStore,
    feeds_list: &[Feeds<f64>],
    loss: NodeId,
    wrt: &[Wrt],
    extra: &[NodeId],
) -> Result<(f64, BTreeMap<String, Tensor>, Vec<GradResult<f64>>)> {
    let results: Vec<GradResult<f64>> = feeds_list
        .par_iter()
        .map(|feeds| graph.gradients(params, feeds, loss, wrt, extra))
        .collect::<duet_core::Result<Vec<_>>>()?;
    let scale = 1.0 / feeds_list.len() as f64;
    let mut mean_loss = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in &results {
        mean_loss += r.loss;
        for (name, g) in &r.grads {
            match grads.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    grads.insert(name.clone(), g.clone());
                }
            }
        }
    }
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((mean_loss * scale, grads, results))
}

fn epoch_batches<'a>(
    order: &'a [usize],
    iterations: usize,
    batch: usize,
) -> impl Iterator<Item = Vec<usize>> + 'a {
    (0..iterations).map(move |it| {
        (0..batch)
            .map(|b| order[(it * batch + b) % order.len()])
            .collect()
    })
}

/// Stage-1 training of the part-wise motion VQ-VAE.
pub fn train_partfusion(
    model: &mut PartFusionVq,
    dataset: &[MotionTargets],
    settings: &TrainSettings,
) -> Result<Vec<EpochStats>> {
    if dataset.is_empty() {
        return Err(ModelError::Invalid("empty training dataset".into()));
    }
    let mut lengths: Vec<usize> = dataset.iter().map(|d| d.frames).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for &t in &lengths {
        model.ensure_train_graph(t);
    }
    let feeds_list: Vec<Feeds<f64>> = dataset.iter().map(|d| model.feeds_for(d)).collect();
    let wrt: Vec<Wrt> = model.params.names().into_iter().map(Wrt::Param).collect();
    let part_names: Vec<String> = model.parts().iter().map(|d| d.name.to_string()).collect();
    let k = model.cfg.codebook_size;
    let mut opt = AdamBase::new(settings.learning_rate, settings.beta1, settings.beta2)
        .with_weight_decay(settings.weight_decay);
    let mut stats = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        opt.set_lr(current_lr(
            settings.learning_rate,
            settings.lr_decay_factor,
            &settings.lr_decay_at,
            epoch,
        ));
        let mut order_rng = substream(settings.seed, &format!("train.vq.epoch{epoch}"));
        let order = shuffled_indices(&mut order_rng, dataset.len());
        let iterations = if settings.iterations_per_epoch == 0 {
            dataset.len().div_ceil(settings.batch_size)
        } else {
            settings.iterations_per_epoch
        };
        let mut epoch_loss = 0.0;
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut used: Vec<Vec<bool>> = vec![vec![false; k]; part_names.len()];
        let mut revival_pool: Vec<Vec<Tensor>> = vec![Vec::new(); part_names.len()];

        for batch in epoch_batches(&order, iterations, settings.batch_size) {
            let t = dataset[batch[0]].frames;
            // batches mix lengths only if the dataset does; group by the
            // first item's length for graph lookup
            let idxs: Vec<usize> = batch.iter().copied().filter(|&i| dataset[i].frames == t).collect();
            let batch_feeds: Vec<Feeds<f64>> = idxs.iter().map(|&i| feeds_list[i].clone()).collect();
            let (loss, grads, per_item) = {
                let tg = model.train_graph_ref(t);
                let mut extra: Vec<NodeId> = tg.terms.iter().map(|(_, n)| *n).collect();
                extra.extend_from_slice(&tg.index_nodes);
                extra.extend_from_slice(&tg.z_e_nodes);
                batch_gradients(&tg.graph, &model.params, &batch_feeds, tg.loss, &wrt, &extra)?
            };
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, loss });
            }
            epoch_loss += loss;
            const TERM_NAMES: [&str; 5] = ["rec_pos", "rec_rot", "rec_transl", "vq_embed", "vq_commit"];
            for r in &per_item {
                for (ti, name) in TERM_NAMES.iter().enumerate() {
                    let v = r.outputs[ti].scalar_value().map_err(ModelError::Core)?;
                    *term_sums.entry(name.to_string()).or_insert(0.0) += v / per_item.len() as f64;
                }
                for p in 0..part_names.len() {
                    let indices = &r.outputs[TERM_NAMES.len() + p];
                    for &v in indices.data() {
                        used[p][v as usize] = true;
                    }
                    let z_e = &r.outputs[TERM_NAMES.len() + part_names.len() + p];
                    if revival_pool[p].len() < 64 {
                        revival_pool[p].push(z_e.clone());
                    }
                }
            }
            opt.step(&mut model.params, &grads).map_err(ModelError::Core)?;
        }

        let iters = if settings.iterations_per_epoch == 0 {
            dataset.len().div_ceil(settings.batch_size)
        } else {
            settings.iterations_per_epoch
        };
        let codebook_utilization: Vec<f64> = used
            .iter()
            .map(|u| u.iter().filter(|&&x| x).count() as f64 / k as f64)
            .collect();

        if model.cfg.dead_entry_revival {
            revive_dead_entries(model, &part_names, &used, &revival_pool, settings.seed, epoch)?;
        }

        stats.push(EpochStats {
            epoch,
            loss: epoch_loss / iters as f64,
            terms: term_sums
                .into_iter()
                .map(|(name, v)| (name, v / iters as f64))
                .collect(),
            codebook_utilization,
        });
    }
    Ok(stats)
}

fn revive_dead_entries(
    model: &mut PartFusionVq,
    part_names: &[String],
    used: &[Vec<bool>],
    pool: &[Vec<Tensor>],
    seed: u64,
    epoch: usize,
) -> Result<()> {
    use rand::Rng;
    let mut rng = substream(seed, &format!("vq.revive.{epoch}"));
    for (p, name) in part_names.iter().enumerate() {
        if pool[p].is_empty() {
            continue;
        }
        // flatten pooled encoder rows
        let c = pool[p][0].shape()[1];
        let mut rows: Vec<&[f64]> = Vec::new();
        for t in &pool[p] {
            for r in 0..t.shape()[0] {
                rows.push(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let cb_name = format!("vq.cb.{name}");
        let cb = model.params.get_mut(&cb_name).map_err(ModelError::Core)?;
        for (kk, &was_used) in used[p].iter().enumerate() {
            if was_used {
                continue;
            }
            let pick = rng.gen_range(0..rows.len());
            let dst = &mut cb.data_mut()[kk * c..(kk + 1) * c];
            dst.copy_from_slice(rows[pick]);
        }
    }
    Ok(())
}

/// Generic loop shared by the trajectory and contact VQ stages.
macro_rules! aux_training {
    ($fn_name:ident, $model:ty, $input_name:literal) => {
        pub fn $fn_name(
            model: &mut $model,
            dataset: &[Tensor],
            settings: &TrainSettings,
        ) -> Result<Vec<EpochStats>> {
            if dataset.is_empty() {
                return Err(ModelError::Invalid("empty training dataset".into()));
            }
            let mut lengths: Vec<usize> = dataset.iter().map(|d| d.shape()[0]).collect();
            lengths.sort_unstable();
            lengths.dedup();
            for &t in &lengths {
                model.ensure_train_graph(t);
            }
            let wrt: Vec<Wrt> = model.params.names().into_iter().map(Wrt::Param).collect();
            let k = model.cfg.codebook_size;
            let mut opt = AdamBase::new(settings.learning_rate, settings.beta1, settings.beta2)
                .with_weight_decay(settings.weight_decay);
            let mut stats = Vec::with_capacity(settings.epochs);
            for epoch in 0..settings.epochs {
                opt.set_lr(current_lr(
                    settings.learning_rate,
                    settings.lr_decay_factor,
                    &settings.lr_decay_at,
                    epoch,
                ));
                let mut order_rng = substream(settings.seed, &format!("train.aux.epoch{epoch}"));
                let order = shuffled_indices(&mut order_rng, dataset.len());
                let iterations = if settings.iterations_per_epoch == 0 {
                    dataset.len().div_ceil(settings.batch_size)
                } else {
                    settings.iterations_per_epoch
                };
                let mut epoch_loss = 0.0;
                let mut used = vec![false; k];
                for batch in epoch_batches(&order, iterations, settings.batch_size) {
                    let t = dataset[batch[0]].shape()[0];
                    let idxs: Vec<usize> = batch
                        .iter()
                        .copied()
                        .filter(|&i| dataset[i].shape()[0] == t)
                        .collect();
                    let batch_feeds: Vec<Feeds<f64>> = idxs
                        .iter()
                        .map(|&i| {
                            let mut f = Feeds::new();
                            f.insert($input_name.to_string(), dataset[i].clone());
                            f
                        })
                        .collect();
                    let (loss, grads, per_item) = {
                        let tg = model.train_graph_ref(t);
                        let extra = vec![tg.index_node];
                        batch_gradients(&tg.graph, &model.params, &batch_feeds, tg.loss, &wrt, &extra)?
                    };
                    if !loss.is_finite() {
                        return Err(ModelError::Diverged { epoch, loss });
                    }
                    epoch_loss += loss;
                    for r in &per_item {
                        for &v in r.outputs[0].data() {
                            used[v as usize] = true;
                        }
                    }
                    opt.step(&mut model.params, &grads).map_err(ModelError::Core)?;
                }
                stats.push(EpochStats {
                    epoch,
                    loss: epoch_loss / iterations as f64,
                    terms: BTreeMap::new(),
                    codebook_utilization: vec![utilization(
                        &used
                            .iter()
                            .enumerate()
                            .filter(|(_, &u)| u)
                            .map(|(i, _)| i)
                            .collect::<Vec<_>>(),
                        k,
                    )],
                });
            }
            Ok(stats)
        }
    };
}

aux_training!(train_trajectory_vq, TrajectoryVq, "d");
aux_training!(train_contact_vq, ContactVq, "c");

/// Music-encoder pretraining: reconstruct the input features from the
/// downsampled encoding. Owns its parameter store.
pub struct MusicPretrainer {
    pub cfg: duet_music::MusicEncoderConfig,
    pub params: duet_core::ParamStore,
    graphs: std::collections::HashMap<usize, (Graph, NodeId)>,
    init_seed: u64,
}

impl MusicPretrainer {
    pub fn new(cfg: duet_music::MusicEncoderConfig, seed: u64) -> Self {
        let mut s = Self {
            cfg,
            params: duet_core::ParamStore::new(),
            graphs: std::collections::HashMap::new(),
            init_seed: seed,
        };
        s.ensure_graph(s.cfg.downsample * 2);
        s
    }

    fn ensure_graph(&mut self, t: usize) {
        if self.graphs.contains_key(&t) {
            return;
        }
        let mut rng = substream(self.init_seed, "music.init");
        let mut g = Graph::new();
        let x = g.input("features");
        let encoded = duet_music::encoder::build_encoder(
            &mut g,
            &mut self.params,
            &mut rng,
            duet_music::encoder::PARAM_PREFIX,
            x,
            t,
            &self.cfg,
        );
        let recon = duet_music::encoder::build_reconstruction_head(
            &mut g,
            &mut self.params,
            &mut rng,
            "music.head",
            encoded,
            &self.cfg,
        );
        let diff = g.sub(recon, x);
        let sq = g.square(diff);
        let loss = g.mean_all(sq);
        self.graphs.insert(t, (g, loss));
    }
}

pub fn train_music(
    model: &mut MusicPretrainer,
    dataset: &[Tensor],
    settings: &TrainSettings,
) -> Result<Vec<EpochStats>> {
    if dataset.is_empty() {
        return Err(ModelError::Invalid("empty training dataset".into()));
    }
    let mut lengths: Vec<usize> = dataset.iter().map(|d| d.shape()[0]).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for &t in &lengths {
        model.ensure_graph(t);
    }
    let wrt: Vec<Wrt> = model.params.names().into_iter().map(Wrt::Param).collect();
    let mut opt = AdamBase::new(settings.learning_rate, settings.beta1, settings.beta2)
        .with_weight_decay(settings.weight_decay);
    let mut stats = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        opt.set_lr(current_lr(
            settings.learning_rate,
            settings.lr_decay_factor,
            &settings.lr_decay_at,
            epoch,
        ));
        let mut order_rng = substream(settings.seed, &format!("train.music.epoch{epoch}"));
        let order = shuffled_indices(&mut order_rng, dataset.len());
        let iterations = if settings.iterations_per_epoch == 0 {
            dataset.len().div_ceil(settings.batch_size)
        } else {
            settings.iterations_per_epoch
        };
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(&order, iterations, settings.batch_size) {
            let t = dataset[batch[0]].shape()[0];
            let idxs: Vec<usize> = batch.iter().copied().filter(|&i| dataset[i].shape()[0] == t).collect();
            let batch_feeds: Vec<Feeds<f64>> = idxs
                .iter()
                .map(|&i| {
                    let mut f = Feeds::new();
                    f.insert("features".into(), dataset[i].clone());
                    f
                })
                .collect();
            let (graph, loss_node) = &model.graphs[&t];
            let (loss, grads, _) = batch_gradients(graph, &model.params, &batch_feeds, *loss_node, &wrt, &[])?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, loss });
            }
            epoch_loss += loss;
            opt.step(&mut model.params, &grads).map_err(ModelError::Core)?;
        }
        stats.push(EpochStats {
            epoch,
            loss: epoch_loss / iterations.max(1) as f64,
            terms: BTreeMap::new(),
            codebook_utilization: Vec::new(),
        });
    }
    Ok(stats)
}

/// One diffusion training item: clean state, leader latents, raw features.
#[derive(Debug, Clone)]
pub struct DiffusionItem {
    pub x0: Tensor,
    pub leader_latents: Tensor,
    pub features: Tensor,
}

/// Encode duets into diffusion training items through the frozen stage-1
/// models. Encoders run once here; their parameters never enter the
/// diffusion parameter store, so their gradients are identically zero.
pub fn prepare_diffusion_dataset(
    pipeline: &mut FrozenPipeline,
    duets: &[DuetSample],
) -> Result<Vec<DiffusionItem>> {
    let map = pipeline.channel_map();
    let mut items = Vec::with_capacity(duets.len());
    for duet in duets {
        let state = pipeline.encode_state(duet)?;
        let leader_targets = pipeline.partfusion.targets_from_motion(&duet.leader);
        let codes = pipeline.partfusion.encode(&leader_targets)?;
        let parts: Vec<Tensor> = codes.into_iter().map(|c| c.pre_quant).collect();
        let leader_latents = concat_leader(&map, &parts)?;
        let features = duet
            .features
            .clone()
            .ok_or_else(|| ModelError::Invalid("duet lacks audio features".into()))?;
        items.push(DiffusionItem {
            x0: state.x,
            leader_latents,
            features,
        });
    }
    Ok(items)
}

fn concat_leader(map: &ChannelMap, parts: &[Tensor]) -> Result<Tensor> {
    let t = parts[0].shape()[0];
    let c = map.latent_dim;
    let mut data = Vec::with_capacity(t * map.parts() * c);
    for ti in 0..t {
        for p in parts {
            data.extend_from_slice(&p.data()[ti * c..(ti + 1) * c]);
        }
    }
    Ok(Tensor::new(vec![t, map.parts() * c], data)?)
}

pub fn train_diffusion(
    model: &mut Rcdiff,
    dataset: &[DiffusionItem],
    settings: &TrainSettings,
) -> Result<Vec<EpochStats>> {
    if dataset.is_empty() {
        return Err(ModelError::Invalid("empty training dataset".into()));
    }
    // diffusion graphs embed the music encoder, so they are keyed by the
    // latent length; feature length is latent length times the downsample
    let mut latent_lengths: Vec<usize> = dataset.iter().map(|d| d.x0.shape()[0]).collect();
    latent_lengths.sort_unstable();
    latent_lengths.dedup();

    // combined graph: features -> music encoder -> y concat with leader
    let mut graphs: std::collections::HashMap<usize, (Graph, NodeId, NodeId)> = std::collections::HashMap::new();
    for &tl in &latent_lengths {
        graphs.insert(tl, build_joint_training_graph(model, tl)?);
    }
    let wrt: Vec<Wrt> = model.params.names().into_iter().map(Wrt::Param).collect();
    let mut opt = AdamBase::new(settings.learning_rate, settings.beta1, settings.beta2)
        .with_weight_decay(settings.weight_decay);
    let steps = model.schedule.steps();
    let mut stats = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        opt.set_lr(current_lr(
            settings.learning_rate,
            settings.lr_decay_factor,
            &settings.lr_decay_at,
            epoch,
        ));
        let mut order_rng = substream(settings.seed, &format!("train.diff.order{epoch}"));
        let order = shuffled_indices(&mut order_rng, dataset.len());
        let iterations = if settings.iterations_per_epoch == 0 {
            dataset.len().div_ceil(settings.batch_size)
        } else {
            settings.iterations_per_epoch
        };
        let mut noise_rng = substream(settings.seed, &format!("train.diff.noise{epoch}"));
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(&order, iterations, settings.batch_size) {
            let tl = dataset[batch[0]].x0.shape()[0];
            let idxs: Vec<usize> = batch.iter().copied().filter(|&i| dataset[i].x0.shape()[0] == tl).collect();
            // draw (t, eps) sequentially for determinism, then fan out
            let mut batch_feeds = Vec::with_capacity(idxs.len());
            for &i in &idxs {
                use rand::Rng;
                let item = &dataset[i];
                let t = noise_rng.gen_range(1..=steps);
                let eps = duet_core::rng::normal_tensor::<f64>(&mut noise_rng, item.x0.shape(), 1.0);
                let x_t = forward_diffuse(&item.x0, &eps, &model.schedule, t)?;
                let mut feeds = Feeds::new();
                feeds.insert("x_t".into(), x_t);
                feeds.insert("x0".into(), item.x0.clone());
                feeds.insert("z_l".into(), item.leader_latents.clone());
                feeds.insert("features".into(), item.features.clone());
                feeds.insert("t_emb".into(), model.timestep_embedding(t, tl));
                batch_feeds.push(feeds);
            }
            let (graph, loss_node, _) = &graphs[&tl];
            let (loss, grads, _) = batch_gradients(graph, &model.params, &batch_feeds, *loss_node, &wrt, &[])?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, loss });
            }
            epoch_loss += loss;
            opt.step(&mut model.params, &grads).map_err(ModelError::Core)?;
        }
        stats.push(EpochStats {
            epoch,
            loss: epoch_loss / iterations.max(1) as f64,
            terms: BTreeMap::new(),
            codebook_utilization: Vec::new(),
        });
    }
    Ok(stats)
}

/// Training graph with the music encoder inline: inputs are the noisy
/// state, the clean state, leader latents, raw features, and the timestep
/// embedding.
fn build_joint_training_graph(model: &mut Rcdiff, t_latent: usize) -> Result<(Graph, NodeId, NodeId)> {
    let mut rng = substream(0, "diffusion.joint.build");
    let mut g = Graph::new();
    let x_t = g.input("x_t");
    let x0 = g.input("x0");
    let z_l = g.input("z_l");
    let features = g.input("features");
    let t_emb = g.input("t_emb");
    let t_frames = t_latent * model.music_cfg.downsample;
    let f_a = duet_music::encoder::build_encoder(
        &mut g,
        &mut model.params,
        &mut rng,
        duet_music::encoder::PARAM_PREFIX,
        features,
        t_frames,
        &model.music_cfg,
    );
    let y = g.concat(vec![z_l, f_a], 1);
    let x0_hat = crate::denoiser::build_denoiser(
        &mut g,
        &mut model.params,
        &mut rng,
        x_t,
        y,
        t_emb,
        t_latent,
        &model.denoiser_cfg,
    );
    let diff = g.sub(x0_hat, x0);
    let sq = g.square(diff);
    let loss = g.mean_all(sq);
    Ok((g, loss, x0_hat))
}

/// Build the sampling condition for one duet through the frozen pipeline.
pub fn condition_for(pipeline: &mut FrozenPipeline, duet: &DuetSample) -> Result<ConditionBundle> {
    let features = duet
        .features
        .clone()
        .ok_or_else(|| ModelError::Invalid("duet lacks audio features".into()))?;
    pipeline.encode_condition(&duet.leader, &features)
}

/// Mean distance over predicted-contact pairs of a decoded sample; `None`
/// when the sample predicts no contacts.
pub fn mean_contact_distance(
    pipeline: &mut FrozenPipeline,
    bundle: &LatentBundle,
    leader: &duet_motion::MotionSequence,
    quantize_first: bool,
) -> Result<Option<f64>> {
    use duet_motion::skeleton::{Skeleton, REDUCED_JOINT_COUNT};
    let (follower, contacts) = pipeline.decode_follower(bundle, leader, quantize_first)?;
    let sk = Skeleton::duet54();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..follower.frames {
        let ff = follower.reduced_global_frame(sk, t);
        let lf = leader.reduced_global_frame(sk, t);
        for i in 0..REDUCED_JOINT_COUNT {
            for j in 0..REDUCED_JOINT_COUNT {
                if contacts.get(t, i, j) == 1 {
                    let mut d2 = 0.0;
                    for d in 0..3 {
                        let diff = ff[i * 3 + d] - lf[j * 3 + d];
                        d2 += diff * diff;
                    }
                    total += d2.sqrt();
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { None } else { Some(total / count as f64) })
}
