//! Standard VQ-VAEs for the relative trajectory and the contact matrix.

use std::collections::HashMap;

use duet_core::graph::Feeds;
use duet_core::rng::substream;
use duet_core::{Graph, NodeId, ParamStore, Tensor};

use duet_motion::skeleton::REDUCED_JOINT_COUNT;

use crate::backbone;
use crate::error::Result;
use crate::losses::{wire_focal_loss, wire_reconstruction_loss};
use crate::quantize::{quantize, wire_quantizer, wire_vq_terms, LatentCode};

pub const CONTACT_CHANNELS: usize = REDUCED_JOINT_COUNT * REDUCED_JOINT_COUNT;
pub const TRAJECTORY_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryVqConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub commitment_weight: f64,
}

impl Default for TrajectoryVqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            latent_dim: 32,
            downsample: 4,
            hidden: 64,
            commitment_weight: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactVqConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub commitment_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Probability threshold for the binary mask.
    pub mask_threshold: f64,
}

impl Default for ContactVqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            latent_dim: 32,
            downsample: 4,
            hidden: 64,
            commitment_weight: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            mask_threshold: 0.5,
        }
    }
}

pub(crate) struct AuxTrainGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub terms: Vec<(&'static str, NodeId)>,
    pub index_node: NodeId,
    pub z_e_node: NodeId,
}

struct AuxDecodeGraph {
    graph: Graph,
    output: NodeId,
}

macro_rules! aux_model {
    ($name:ident, $cfg:ty) => {
        pub struct $name {
            pub cfg: $cfg,
            pub params: ParamStore,
            init_seed: u64,
            train_graphs: HashMap<usize, AuxTrainGraph>,
            decode_graphs: HashMap<(usize, bool), AuxDecodeGraph>,
        }
    };
}

aux_model!(TrajectoryVq, TrajectoryVqConfig);
aux_model!(ContactVq, ContactVqConfig);

impl TrajectoryVq {
    pub const PREFIX: &'static str = "traj";

    pub fn new(cfg: TrajectoryVqConfig, seed: u64) -> Self {
        let mut model = Self {
            cfg,
            params: ParamStore::new(),
            init_seed: seed,
            train_graphs: HashMap::new(),
            decode_graphs: HashMap::new(),
        };
        let mut rng = substream(seed, "traj.init.codebook");
        let (k, c) = (model.cfg.codebook_size, model.cfg.latent_dim);
        model
            .params
            .init("traj.cb", || duet_core::rng::normal_tensor(&mut rng, &[k, c], 0.5));
        model.ensure_train_graph(model.cfg.downsample * 4);
        model
    }

    pub(crate) fn ensure_train_graph(&mut self, t: usize) {
        if self.train_graphs.contains_key(&t) {
            return;
        }
        let mut rng = substream(self.init_seed, "traj.init.net");
        let mut g = Graph::new();
        let x = g.input("d");
        let z_e = backbone::build_encoder(
            &mut g,
            &mut self.params,
            &mut rng,
            "traj.enc",
            x,
            TRAJECTORY_CHANNELS,
            self.cfg.hidden,
            self.cfg.latent_dim,
            self.cfg.downsample,
        );
        let cb = g.param("traj.cb");
        let q = wire_quantizer(&mut g, z_e, cb);
        let recon = backbone::build_decoder(
            &mut g,
            &mut self.params,
            &mut rng,
            "traj.dec",
            q.z_st,
            self.cfg.latent_dim,
            self.cfg.hidden,
            TRAJECTORY_CHANNELS,
            self.cfg.downsample,
        );
        let rec = wire_reconstruction_loss(&mut g, recon, x, t);
        let (embed, commit) = wire_vq_terms(&mut g, z_e, q.z_q);
        let commit_scaled = g.scale(commit, self.cfg.commitment_weight);
        let vq = g.add(embed, commit_scaled);
        let loss = g.add(rec, vq);
        self.train_graphs.insert(
            t,
            AuxTrainGraph {
                graph: g,
                loss,
                terms: vec![("rec", rec), ("vq_embed", embed), ("vq_commit", commit)],
                index_node: q.indices,
                z_e_node: z_e,
            },
        );
    }

    pub(crate) fn train_graph(&mut self, t: usize) -> &AuxTrainGraph {
        self.ensure_train_graph(t);
        &self.train_graphs[&t]
    }

    pub(crate) fn train_graph_ref(&self, t: usize) -> &AuxTrainGraph {
        &self.train_graphs[&t]
    }

    fn ensure_decode_graph(&mut self, t_prime: usize, quantized: bool) {
        if self.decode_graphs.contains_key(&(t_prime, quantized)) {
            return;
        }
        let mut rng = substream(self.init_seed, "traj.init.net");
        let mut g = Graph::new();
        let z_in = g.input("z");
        let z = if quantized {
            let cb = g.param("traj.cb");
            wire_quantizer(&mut g, z_in, cb).z_st
        } else {
            z_in
        };
        let out = backbone::build_decoder(
            &mut g,
            &mut self.params,
            &mut rng,
            "traj.dec",
            z,
            self.cfg.latent_dim,
            self.cfg.hidden,
            TRAJECTORY_CHANNELS,
            self.cfg.downsample,
        );
        self.decode_graphs.insert((t_prime, quantized), AuxDecodeGraph { graph: g, output: out });
    }

    /// Encode [T, 3] offsets to a latent code.
    pub fn encode(&mut self, offsets: &Tensor) -> Result<LatentCode> {
        let t = offsets.shape()[0];
        self.ensure_train_graph(t);
        let tg = &self.train_graphs[&t];
        let mut feeds = Feeds::new();
        feeds.insert("d".into(), offsets.clone());
        let z = tg.graph.evaluate(&self.params, &feeds, &[tg.z_e_node])?;
        quantize(&z[0], self.params.get("traj.cb")?)
    }

    /// Decode [T', C] latents back to [T, 3] offsets.
    pub fn decode(&mut self, z: &Tensor, quantize_first: bool) -> Result<Tensor> {
        let t_prime = z.shape()[0];
        self.ensure_decode_graph(t_prime, quantize_first);
        let dg = &self.decode_graphs[&(t_prime, quantize_first)];
        let mut feeds = Feeds::new();
        feeds.insert("z".into(), z.clone());
        Ok(dg.graph.evaluate(&self.params, &feeds, &[dg.output])?.remove(0))
    }
}

impl ContactVq {
    pub const PREFIX: &'static str = "contact";

    pub fn new(cfg: ContactVqConfig, seed: u64) -> Self {
        let mut model = Self {
            cfg,
            params: ParamStore::new(),
            init_seed: seed,
            train_graphs: HashMap::new(),
            decode_graphs: HashMap::new(),
        };
        let mut rng = substream(seed, "contact.init.codebook");
        let (k, c) = (model.cfg.codebook_size, model.cfg.latent_dim);
        model
            .params
            .init("contact.cb", || duet_core::rng::normal_tensor(&mut rng, &[k, c], 0.5));
        model.ensure_train_graph(model.cfg.downsample * 4);
        model
    }

    pub(crate) fn ensure_train_graph(&mut self, t: usize) {
        if self.train_graphs.contains_key(&t) {
            return;
        }
        let mut rng = substream(self.init_seed, "contact.init.net");
        let mut g = Graph::new();
        // per-frame 23x23 matrix flattened to 529 channels
        let x = g.input("c");
        let z_e = backbone::build_encoder(
            &mut g,
            &mut self.params,
            &mut rng,
            "contact.enc",
            x,
            CONTACT_CHANNELS,
            self.cfg.hidden,
            self.cfg.latent_dim,
            self.cfg.downsample,
        );
        let cb = g.param("contact.cb");
        let q = wire_quantizer(&mut g, z_e, cb);
        let logits = backbone::build_decoder(
            &mut g,
            &mut self.params,
            &mut rng,
            "contact.dec",
            q.z_st,
            self.cfg.latent_dim,
            self.cfg.hidden,
            CONTACT_CHANNELS,
            self.cfg.downsample,
        );
        let focal = wire_focal_loss(&mut g, logits, x, self.cfg.focal_alpha, self.cfg.focal_gamma);
        let (embed, commit) = wire_vq_terms(&mut g, z_e, q.z_q);
        let commit_scaled = g.scale(commit, self.cfg.commitment_weight);
        let vq = g.add(embed, commit_scaled);
        let loss = g.add(focal, vq);
        self.train_graphs.insert(
            t,
            AuxTrainGraph {
                graph: g,
                loss,
                terms: vec![("focal", focal), ("vq_embed", embed), ("vq_commit", commit)],
                index_node: q.indices,
                z_e_node: z_e,
            },
        );
    }

    pub(crate) fn train_graph(&mut self, t: usize) -> &AuxTrainGraph {
        self.ensure_train_graph(t);
        &self.train_graphs[&t]
    }

    pub(crate) fn train_graph_ref(&self, t: usize) -> &AuxTrainGraph {
        &self.train_graphs[&t]
    }

    fn ensure_decode_graph(&mut self, t_prime: usize, quantized: bool) {
        if self.decode_graphs.contains_key(&(t_prime, quantized)) {
            return;
        }
        let mut rng = substream(self.init_seed, "contact.init.net");
        let mut g = Graph::new();
        let z_in = g.input("z");
        let z = if quantized {
            let cb = g.param("contact.cb");
            wire_quantizer(&mut g, z_in, cb).z_st
        } else {
            z_in
        };
        let logits = backbone::build_decoder(
            &mut g,
            &mut self.params,
            &mut rng,
            "contact.dec",
            z,
            self.cfg.latent_dim,
            self.cfg.hidden,
            CONTACT_CHANNELS,
            self.cfg.downsample,
        );
        self.decode_graphs.insert((t_prime, quantized), AuxDecodeGraph { graph: g, output: logits });
    }

    pub fn encode(&mut self, contacts: &Tensor) -> Result<LatentCode> {
        let t = contacts.shape()[0];
        self.ensure_train_graph(t);
        let tg = &self.train_graphs[&t];
        let mut feeds = Feeds::new();
        feeds.insert("c".into(), contacts.clone());
        let z = tg.graph.evaluate(&self.params, &feeds, &[tg.z_e_node])?;
        quantize(&z[0], self.params.get("contact.cb")?)
    }

    /// Decode latents to logits [T, 529].
    pub fn decode_logits(&mut self, z: &Tensor, quantize_first: bool) -> Result<Tensor> {
        let t_prime = z.shape()[0];
        self.ensure_decode_graph(t_prime, quantize_first);
        let dg = &self.decode_graphs[&(t_prime, quantize_first)];
        let mut feeds = Feeds::new();
        feeds.insert("z".into(), z.clone());
        Ok(dg.graph.evaluate(&self.params, &feeds, &[dg.output])?.remove(0))
    }

    /// Decode latents to probabilities and a binary mask.
    pub fn decode_contact(&mut self, z: &Tensor, quantize_first: bool) -> Result<(Tensor, Vec<u8>)> {
        let logits = self.decode_logits(z, quantize_first)?;
        let probs = logits.map(sigmoid);
        let mask = probs
            .data()
            .iter()
            .map(|&p| if p > self.cfg.mask_threshold { 1 } else { 0 })
            .collect();
        Ok((probs, mask))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
