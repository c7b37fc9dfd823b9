//! End-to-end contracts on a miniature pipeline: stage-1 training
//! behavior, the frozen-encoder guarantee during diffusion training, and
//! the deterministic guided sampler.

use duet_core::graph::{Feeds, Wrt};
use duet_core::rng::{normal_tensor, substream};
use duet_core::{Graph, Tensor};
use duet_model::auxvq::{ContactVq, ContactVqConfig, TrajectoryVq, TrajectoryVqConfig};
use duet_model::bundle::{ChannelMap, LatentBundle};
use duet_model::diffusion::{Rcdiff, RcdiffConfig};
use duet_model::partfusion::{PartFusionConfig, PartFusionVq, VqMode};
use duet_model::sampler::{FrozenPipeline, Sampler, SamplerConfig};
use duet_model::training::{
    prepare_diffusion_dataset, train_contact_vq, train_diffusion, train_partfusion,
    train_trajectory_vq, TrainSettings,
};
use duet_motion::{synth_duet, DuetSample, SynthConfig};
use duet_music::{extract_features, synth_click_track, MusicEncoderConfig};

const LATENT: usize = 8;
const FRAMES: usize = 32;

fn tiny_vq_cfg(mode: VqMode) -> PartFusionConfig {
    PartFusionConfig {
        mode,
        codebook_size: 16,
        latent_dim: LATENT,
        downsample: 4,
        hidden: 16,
        fusion_dim: 32,
        commitment_weight: 0.25,
        dead_entry_revival: true,
    }
}

fn tiny_traj_cfg() -> TrajectoryVqConfig {
    TrajectoryVqConfig {
        codebook_size: 16,
        latent_dim: LATENT,
        hidden: 16,
        ..TrajectoryVqConfig::default()
    }
}

fn tiny_contact_cfg() -> ContactVqConfig {
    ContactVqConfig {
        codebook_size: 16,
        latent_dim: LATENT,
        hidden: 16,
        ..ContactVqConfig::default()
    }
}

fn tiny_music_cfg() -> MusicEncoderConfig {
    MusicEncoderConfig {
        input_channels: 54,
        model_dim: LATENT,
        heads: 2,
        blocks: 1,
        downsample: 4,
    }
}

fn tiny_rcdiff_cfg() -> RcdiffConfig {
    RcdiffConfig {
        train_steps: 100,
        d_model: 32,
        heads: 2,
        blocks: 1,
        timestep_dim: 8,
        ..RcdiffConfig::default()
    }
}

fn make_duets(n: usize) -> Vec<DuetSample> {
    (0..n)
        .map(|i| {
            let cfg = SynthConfig {
                frames: FRAMES,
                ..SynthConfig::default()
            };
            let mut duet = synth_duet(&cfg, 100 + i as u64).unwrap();
            let wave = synth_click_track(cfg.tempo_bpm, FRAMES as f64 / cfg.fps, 16_000, i as u64);
            let features = extract_features(&wave, 16_000, cfg.fps).unwrap();
            assert_eq!(features.frames(), FRAMES);
            duet.features = Some(features.values);
            duet
        })
        .collect()
}

fn quick_settings(epochs: usize, seed: u64) -> TrainSettings {
    TrainSettings {
        epochs,
        iterations_per_epoch: 0,
        batch_size: 4,
        learning_rate: 3e-3,
        lr_decay_factor: 0.1,
        lr_decay_at: vec![],
        beta1: 0.5,
        beta2: 0.999,
        weight_decay: 0.0,
        seed,
    }
}

fn trained_pipeline(duets: &[DuetSample], seed: u64) -> FrozenPipeline {
    let mut vq = PartFusionVq::new(tiny_vq_cfg(VqMode::Fused), seed);
    let motions: Vec<_> = duets
        .iter()
        .flat_map(|d| [vq.targets_from_motion(&d.leader), vq.targets_from_motion(&d.follower)])
        .collect();
    train_partfusion(&mut vq, &motions, &quick_settings(30, seed)).unwrap();

    let mut traj = TrajectoryVq::new(tiny_traj_cfg(), seed);
    let traj_data: Vec<Tensor> = duets
        .iter()
        .map(|d| Tensor::new(vec![d.frames(), 3], d.trajectory.offsets.clone()).unwrap())
        .collect();
    train_trajectory_vq(&mut traj, &traj_data, &quick_settings(30, seed)).unwrap();

    let mut contact = ContactVq::new(tiny_contact_cfg(), seed);
    let contact_data: Vec<Tensor> = duets.iter().map(|d| d.contacts.to_tensor()).collect();
    train_contact_vq(&mut contact, &contact_data, &quick_settings(30, seed)).unwrap();

    let map = ChannelMap::new(&["U", "D", "L", "R"], LATENT);
    let rcdiff = Rcdiff::new(tiny_rcdiff_cfg(), map, tiny_music_cfg(), seed).unwrap();
    let mut pipeline = FrozenPipeline {
        partfusion: vq,
        trajectory: traj,
        contact,
        rcdiff,
    };
    let items = prepare_diffusion_dataset(&mut pipeline, duets).unwrap();
    let mut settings = quick_settings(40, seed);
    settings.beta1 = 0.9;
    settings.learning_rate = 2e-3;
    settings.weight_decay = 1e-4;
    train_diffusion(&mut pipeline.rcdiff, &items, &settings).unwrap();
    pipeline
}

#[test]
fn overfitting_one_sequence_decreases_reconstruction() {
    let duets = make_duets(1);
    let mut vq = PartFusionVq::new(tiny_vq_cfg(VqMode::Fused), 0);
    let motions = vec![vq.targets_from_motion(&duets[0].follower)];
    let mut settings = quick_settings(50, 0);
    settings.batch_size = 1;
    let stats = train_partfusion(&mut vq, &motions, &settings).unwrap();
    assert_eq!(stats.len(), 50);
    // smoothed position-reconstruction trend over the first 50 epochs
    let rec: Vec<f64> = stats.iter().map(|s| s.terms["rec_pos"]).collect();
    let window = 10;
    let smooth = |lo: usize| -> f64 { rec[lo..lo + window].iter().sum::<f64>() / window as f64 };
    let early = smooth(0);
    let mid = smooth(20);
    let late = smooth(40);
    assert!(mid < early, "smoothed rec loss must fall: {early} -> {mid}");
    assert!(late < mid, "smoothed rec loss must keep falling: {mid} -> {late}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let duets = make_duets(2);
    let run = || {
        let mut vq = PartFusionVq::new(tiny_vq_cfg(VqMode::Fused), 5);
        let motions: Vec<_> = duets.iter().map(|d| vq.targets_from_motion(&d.follower)).collect();
        let stats = train_partfusion(&mut vq, &motions, &quick_settings(8, 5)).unwrap();
        stats.last().unwrap().loss
    };
    let a = run();
    let b = run();
    assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
}

#[test]
fn vq_default_settings_use_the_published_betas() {
    let s = TrainSettings::vq_defaults(0);
    assert_eq!(s.beta1, 0.5);
    assert_eq!(s.beta2, 0.999);
    let d = TrainSettings::diffusion_defaults(0);
    assert!(d.weight_decay > 0.0, "diffusion stage uses decoupled weight decay");
}

#[test]
fn diffusion_training_loss_basics() {
    // an oracle denoiser that returns x0 exactly has zero loss; one that
    // returns zeros scores the mean square of x0
    let mut rng = substream(11, "loss");
    let x0 = normal_tensor::<f64>(&mut rng, &[6, 8], 1.0);
    let mse = |a: &Tensor, b: &Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
    };
    assert_eq!(mse(&x0, &x0), 0.0);
    let zero = Tensor::zeros(&[6, 8]);
    let want: f64 = x0.data().iter().map(|v| v * v).sum::<f64>() / x0.numel() as f64;
    assert!((mse(&zero, &x0) - want).abs() < 1e-15);
}

#[test]
fn vq_parameters_receive_zero_gradient_through_the_frozen_boundary() {
    // combined graph: encoder -> stop-gradient -> denoiser loss. The VQ
    // parameters sit in the same store yet must get exactly zero gradient,
    // while denoiser parameters receive nonzero gradient.
    let duets = make_duets(1);
    let vq = PartFusionVq::new(tiny_vq_cfg(VqMode::Fused), 3);
    let targets = vq.targets_from_motion(&duets[0].follower);

    let mut g = Graph::new();
    let mut params = duet_core::ParamStore::new();
    params.absorb(&vq.params);
    let mut rng = substream(99, "freeze");
    let part_inputs: Vec<_> = vq.parts().iter().map(|d| g.input(&format!("p.{}", d.name))).collect();
    let z_e = duet_model::partfusion::wire_encoders(&vq.cfg, vq.parts(), &mut g, &mut params, &mut rng, &part_inputs);
    let frozen: Vec<_> = z_e.iter().map(|&z| g.stop_gradient(z)).collect();
    let x0 = g.concat(frozen, 1);
    let denoiser_cfg = duet_model::DenoiserConfig {
        d_model: 16,
        heads: 2,
        blocks: 1,
        timestep_dim: 8,
        x_channels: LATENT * 4,
        y_channels: 4,
    };
    let y = g.input("y");
    let temb = g.input("t_emb");
    let x_t = g.input("x_t");
    let pred = duet_model::denoiser::build_denoiser(&mut g, &mut params, &mut rng, x_t, y, temb, 8, &denoiser_cfg);
    let diff = g.sub(pred, x0);
    let sq = g.square(diff);
    let loss = g.mean_all(sq);

    let mut feeds = Feeds::new();
    for (def, part) in vq.parts().iter().zip(&targets.part_positions) {
        feeds.insert(format!("p.{}", def.name), part.clone());
    }
    feeds.insert("y".into(), normal_tensor(&mut rng, &[8, 4], 1.0));
    feeds.insert("t_emb".into(), duet_core::nn::timestep_embedding(3, 8, 8));
    feeds.insert("x_t".into(), normal_tensor(&mut rng, &[8, LATENT * 4], 1.0));

    let wrt: Vec<Wrt> = params.names().into_iter().map(Wrt::Param).collect();
    let res = g.gradients(&params, &feeds, loss, &wrt, &[]).unwrap();
    let mut denoiser_nonzero = false;
    for (name, grad) in &res.grads {
        if name.starts_with("vq.") {
            assert!(
                grad.data().iter().all(|&v| v == 0.0),
                "frozen parameter {name} received gradient"
            );
        } else if name.starts_with("denoiser.") && grad.data().iter().any(|&v| v != 0.0) {
            denoiser_nonzero = true;
        }
    }
    assert!(denoiser_nonzero, "denoiser must receive gradient");
}

#[test]
fn full_pipeline_sampling_contracts() {
    let duets = make_duets(4);
    let mut pipeline = trained_pipeline(&duets, 1);
    let condition = duet_model::training::condition_for(&mut pipeline, &duets[0]).unwrap();
    let leader = duets[0].leader.clone();

    // 1. DDIM determinism: identical seeds give bitwise identical samples
    let mut sampler = Sampler::new(
        &pipeline,
        SamplerConfig {
            steps: 10,
            lambda_c: 0.1,
            guidance: true,
            gradient_clip: 1.0,
        },
    );
    let a = sampler.sample(&mut pipeline, &condition, &leader, 7).unwrap();
    let b = sampler.sample(&mut pipeline, &condition, &leader, 7).unwrap();
    assert_eq!(a.bundle.x.data(), b.bundle.x.data());
    assert_eq!(a.guidance_trace, b.guidance_trace);
    assert_eq!(a.guidance_trace.len(), 10);
    let c = sampler.sample(&mut pipeline, &condition, &leader, 8).unwrap();
    assert_ne!(a.bundle.x.data(), c.bundle.x.data());

    // 2. lambda = 0 is bitwise identical to the guidance-disabled path
    let mut s_zero = Sampler::new(
        &pipeline,
        SamplerConfig {
            steps: 10,
            lambda_c: 0.0,
            guidance: true,
            gradient_clip: 1.0,
        },
    );
    let mut s_off = Sampler::new(
        &pipeline,
        SamplerConfig {
            steps: 10,
            lambda_c: 0.1,
            guidance: false,
            gradient_clip: 1.0,
        },
    );
    let za = s_zero.sample(&mut pipeline, &condition, &leader, 9).unwrap();
    let zb = s_off.sample(&mut pipeline, &condition, &leader, 9).unwrap();
    assert_eq!(za.bundle.x.data(), zb.bundle.x.data());
    assert!(za.guidance_trace.is_empty() && zb.guidance_trace.is_empty());

    // 3. an oracle denoiser returning x0 recovers x0 exactly at full depth
    let x0 = pipeline.encode_state(&duets[0]).unwrap();
    let schedule = pipeline.rcdiff.schedule.clone();
    let full = Sampler::new(
        &pipeline,
        SamplerConfig {
            steps: schedule.steps(),
            lambda_c: 0.0,
            guidance: false,
            gradient_clip: 1.0,
        },
    );
    let mut first_prediction: Option<Tensor> = None;
    let out = full
        .sample_with(
            &schedule,
            |_, _| {
                if first_prediction.is_none() {
                    first_prediction = Some(x0.x.clone());
                }
                Ok(x0.x.clone())
            },
            x0.x.shape(),
            3,
        )
        .unwrap();
    assert_eq!(first_prediction.unwrap().data(), x0.x.data());
    assert_eq!(out.data(), x0.x.data());

    // 4. score sign convention: an infinitesimal step along the negative
    // guidance gradient strictly decreases the contact loss
    let mut rng = substream(40, "descent");
    let x_t = normal_tensor::<f64>(&mut rng, x0.x.shape(), 1.0);
    let t = schedule.steps() / 2;
    let (loss0, grad) = sampler
        .guidance_loss_at(&mut pipeline, &x_t, &condition, &leader, t)
        .unwrap();
    let gnorm: f64 = grad.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(gnorm > 0.0, "guidance gradient must be nonzero when contacts are predicted");
    let step = 1e-4 / gnorm;
    let stepped_data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| x - step * g)
        .collect();
    let stepped = Tensor::new(x_t.shape().to_vec(), stepped_data).unwrap();
    let (loss1, _) = sampler
        .guidance_loss_at(&mut pipeline, &stepped, &condition, &leader, t)
        .unwrap();
    assert!(loss1 < loss0, "descent step must reduce the loss: {loss0} -> {loss1}");

    // 5. graph-computed guidance loss agrees with the plain decode path
    let x0_hat = pipeline
        .rcdiff
        .predict_x0(&x_t, &condition.y, t)
        .unwrap();
    let bundle = LatentBundle::from_tensor(pipeline.channel_map(), x0_hat).unwrap();
    let plain = pipeline.contact_guidance_loss(&bundle, &leader).unwrap();
    assert!(
        (plain - loss0).abs() <= 1e-9 * loss0.abs().max(1.0),
        "graph loss {loss0} vs plain loss {plain}"
    );
}

#[test]
fn decode_follower_contracts() {
    let duets = make_duets(2);
    let mut pipeline = trained_pipeline(&duets, 2);
    let duet = &duets[0];

    // encode-decode path: decoding the encoded ground truth equals the
    // stage-1 reconstruction (no diffusion in the loop)
    let bundle = pipeline.encode_state(duet).unwrap();
    let (follower, contacts) = pipeline.decode_follower(&bundle, &duet.leader, true).unwrap();
    let targets = pipeline.partfusion.targets_from_motion(&duet.follower);
    let codes = pipeline.partfusion.encode(&targets).unwrap();
    let latents: Vec<Tensor> = codes.iter().map(|c| c.pre_quant.clone()).collect();
    let (pos, _, _) = pipeline.partfusion.decode(&latents, true).unwrap();
    // same joints up to the root recentering that decode_follower applies
    for t in 0..duet.frames() {
        for j in 0..54 {
            let direct = [
                pos.data()[(t * 54 + j) * 3] - pos.data()[t * 54 * 3],
                pos.data()[(t * 54 + j) * 3 + 1] - pos.data()[t * 54 * 3 + 1],
                pos.data()[(t * 54 + j) * 3 + 2] - pos.data()[t * 54 * 3 + 2],
            ];
            let got = follower.local_pos(t, j);
            for d in 0..3 {
                assert!((direct[d] - got[d]).abs() < 1e-12);
            }
        }
    }

    // the decoded contact mask equals decoding the contact channels alone
    let (_, direct_mask) = pipeline
        .contact
        .decode_contact(&bundle.contact(), true)
        .unwrap();
    assert_eq!(contacts.entries, direct_mask);

    // zeroed trajectory and motion decoders put the follower at the leader
    let mut zeroed = trained_pipeline(&duets, 2);
    let names: Vec<String> = zeroed
        .partfusion
        .params
        .names()
        .into_iter()
        .filter(|n| n.starts_with("vq.dec."))
        .collect();
    for n in names {
        let shape = zeroed.partfusion.params.get(&n).unwrap().shape().to_vec();
        zeroed.partfusion.params.set(&n, Tensor::zeros(&shape));
    }
    let names: Vec<String> = zeroed
        .trajectory
        .params
        .names()
        .into_iter()
        .filter(|n| n.starts_with("traj.dec."))
        .collect();
    for n in names {
        let shape = zeroed.trajectory.params.get(&n).unwrap().shape().to_vec();
        zeroed.trajectory.params.set(&n, Tensor::zeros(&shape));
    }
    let (follower0, _) = zeroed.decode_follower(&bundle, &duet.leader, false).unwrap();
    for t in 0..duet.frames() {
        assert_eq!(follower0.root(t), duet.leader.root(t));
    }
}
