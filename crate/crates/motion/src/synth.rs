//! Procedural duet generator.
//!
//! The leader walks a smooth circular path with limb swings phase-locked to
//! the tempo; the follower mirrors the leader's pose with a configurable lag
//! and faces the leader at arm's length. Scripted contact episodes rigidly
//! shift the follower's root so the designated joint pair stays within half
//! the contact threshold, with a smoothstep ramp in and out. All motion
//! comes from forward kinematics over constant bone offsets, so bone
//! lengths are exact by construction.

use rand::Rng;

use duet_core::rng::substream;

use crate::error::{MotionError, Result};
use crate::math::{add, dist, norm, scale, smoothstep, sub, Mat3, Vec3};
use crate::sequence::{compute_relative_trajectory, extract_contact, DuetSample, MotionSequence};
use crate::skeleton::{reduced, Skeleton, REDUCED_JOINT_COUNT};

/// One scripted contact: a follower joint held to a leader joint over an
/// inclusive frame range (reduced 23-joint indices).
#[derive(Debug, Clone, PartialEq)]
pub struct ContactEpisode {
    pub follower_joint: usize,
    pub leader_joint: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeSpec {
    /// Evenly spaced wrist-to-wrist episodes.
    Auto { count: usize },
    Explicit(Vec<ContactEpisode>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub fps: f64,
    pub tempo_bpm: f64,
    /// Contact threshold fed to `extract_contact`; episodes hold pairs
    /// within half of it.
    pub contact_delta: f64,
    /// Frames the follower trails the leader.
    pub follower_lag: usize,
    pub episodes: EpisodeSpec,
    /// Nominal distance between the dancers' roots.
    pub partner_distance: f64,
    /// Radius of the leader's root path.
    pub path_radius: f64,
    /// Peak limb swing in radians.
    pub swing_amplitude: f64,
    /// Ramp length on both sides of an episode.
    pub ramp_frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            fps: 30.0,
            tempo_bpm: 120.0,
            contact_delta: 0.10,
            follower_lag: 6,
            episodes: EpisodeSpec::Auto { count: 2 },
            partner_distance: 0.85,
            path_radius: 0.8,
            swing_amplitude: 0.5,
            ramp_frames: 4,
        }
    }
}

/// Per-sequence randomized style parameters.
struct Style {
    phase: f64,
    path_phase: f64,
    swing: f64,
    leg_swing: f64,
    bob: f64,
    curl: f64,
    path_speed: f64,
}

impl Style {
    fn draw(seed: u64) -> Style {
        let mut rng = substream(seed, "synth.style");
        Style {
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            path_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            swing: rng.gen_range(0.8..1.2),
            leg_swing: rng.gen_range(0.6..1.0),
            bob: rng.gen_range(0.015..0.03),
            curl: rng.gen_range(0.25..0.45),
            path_speed: rng.gen_range(0.04..0.07),
        }
    }
}

fn forward_kinematics(sk: &Skeleton, rots: &[Mat3], root_pos: Vec3) -> Vec<f64> {
    let j = sk.joint_count();
    let mut global_rot = vec![Mat3::identity(); j];
    let mut pos = vec![[0.0f64; 3]; j];
    global_rot[0] = rots[0];
    pos[0] = root_pos;
    for i in 1..j {
        let p = sk.parents[i] as usize;
        pos[i] = add(pos[p], global_rot[p].apply(sk.rest_offsets[i]));
        global_rot[i] = global_rot[p].mul(&rots[i]);
    }
    let mut flat = Vec::with_capacity(j * 3);
    for p in pos {
        flat.extend_from_slice(&p);
    }
    flat
}

/// Leader local joint rotations at beat phase `ph`.
fn leader_pose(sk: &Skeleton, style: &Style, ph: f64, heading: f64, swing_amp: f64) -> Vec<Mat3> {
    let j = sk.joint_count();
    let mut rots = vec![Mat3::identity(); j];
    let idx = |n: &str| sk.joint_index(n).expect("known joint");
    let a = swing_amp * style.swing;
    let leg = swing_amp * style.leg_swing * 0.7;

    rots[0] = Mat3::rot_y(heading + 0.06 * (ph).sin());
    rots[idx("spine1")] = Mat3::rot_y(0.10 * ph.sin()).mul(&Mat3::rot_x(0.04 * (2.0 * ph).sin()));
    rots[idx("spine2")] = Mat3::rot_y(0.08 * (ph + 0.4).sin());
    rots[idx("neck")] = Mat3::rot_x(0.08 * (ph + 1.0).sin());

    // arms extend along +-x: rot_y swings them forward/back, rot_z raises them
    rots[idx("left_shoulder")] = Mat3::rot_y(a * ph.sin()).mul(&Mat3::rot_z(0.25 * a * (ph * 0.5).sin()));
    rots[idx("right_shoulder")] = Mat3::rot_y(-a * (ph + std::f64::consts::PI).sin())
        .mul(&Mat3::rot_z(-0.25 * a * (ph * 0.5 + 0.3).sin()));
    rots[idx("left_elbow")] = Mat3::rot_y(0.5 * a * (0.5 + 0.5 * (ph + 0.7).sin()));
    rots[idx("right_elbow")] = Mat3::rot_y(-0.5 * a * (0.5 + 0.5 * (ph + std::f64::consts::PI + 0.7).sin()));

    // legs extend along -y: rot_x swings them forward/back
    rots[idx("left_hip")] = Mat3::rot_x(leg * ph.sin());
    rots[idx("right_hip")] = Mat3::rot_x(leg * (ph + std::f64::consts::PI).sin());
    rots[idx("left_knee")] = Mat3::rot_x(0.8 * leg * (0.5 + 0.5 * (ph + std::f64::consts::PI).sin()));
    rots[idx("right_knee")] = Mat3::rot_x(0.8 * leg * (0.5 + 0.5 * ph.sin()));

    // gentle finger curl, oscillating with the beat
    let curl = style.curl + 0.12 * ph.sin();
    for &f in &sk.left_fingers {
        rots[f] = Mat3::rot_z(-curl);
    }
    for &f in &sk.right_fingers {
        rots[f] = Mat3::rot_z(curl);
    }
    rots
}

/// Mirror a pose left<->right (root rotation handled by the caller).
fn mirror_pose(sk: &Skeleton, rots: &[Mat3]) -> Vec<Mat3> {
    let mut out = vec![Mat3::identity(); rots.len()];
    for j in 0..rots.len() {
        out[sk.mirror_joint(j)] = rots[j].mirror_x();
    }
    out
}

fn auto_episodes(cfg: &SynthConfig, seed: u64) -> Vec<ContactEpisode> {
    let EpisodeSpec::Auto { count } = cfg.episodes else {
        unreachable!()
    };
    if count == 0 || cfg.frames < 8 {
        return Vec::new();
    }
    let mut rng = substream(seed, "synth.episodes");
    let mut episodes = Vec::with_capacity(count);
    let span = cfg.frames / count.max(1);
    let dur = ((cfg.fps * 0.5) as usize).clamp(3, span.saturating_sub(2 * cfg.ramp_frames + 2).max(3));
    for i in 0..count {
        let lo = i * span + cfg.ramp_frames + 1;
        let hi = ((i + 1) * span).saturating_sub(dur + cfg.ramp_frames + 1);
        if hi <= lo || hi >= cfg.frames {
            continue;
        }
        let start = rng.gen_range(lo..=hi.min(cfg.frames - dur - 1));
        let (fj, lj) = if i % 2 == 0 {
            (reduced::RIGHT_WRIST, reduced::RIGHT_WRIST)
        } else {
            (reduced::LEFT_WRIST, reduced::LEFT_WRIST)
        };
        episodes.push(ContactEpisode {
            follower_joint: fj,
            leader_joint: lj,
            start,
            end: start + dur - 1,
        });
    }
    episodes
}

fn reduced_point(frame: &[f64], joint: usize) -> Vec3 {
    [frame[joint * 3], frame[joint * 3 + 1], frame[joint * 3 + 2]]
}

/// Generate one duet. Deterministic per (config, seed); the returned
/// contact matrix is `extract_contact` of the generated motions.
pub fn synth_duet(cfg: &SynthConfig, seed: u64) -> Result<DuetSample> {
    if cfg.frames == 0 || cfg.fps <= 0.0 || cfg.tempo_bpm <= 0.0 {
        return Err(MotionError::Invalid("frames, fps, and tempo must be positive".into()));
    }
    if cfg.contact_delta <= 0.0 {
        return Err(MotionError::Invalid("contact_delta must be positive".into()));
    }
    let sk = Skeleton::duet54();
    let episodes = match &cfg.episodes {
        EpisodeSpec::Auto { .. } => auto_episodes(cfg, seed),
        EpisodeSpec::Explicit(list) => list.clone(),
    };
    for ep in &episodes {
        if ep.start > ep.end || ep.end >= cfg.frames {
            return Err(MotionError::Invalid(format!(
                "episode frames {}..={} outside sequence of {} frames",
                ep.start, ep.end, cfg.frames
            )));
        }
        if ep.follower_joint >= REDUCED_JOINT_COUNT || ep.leader_joint >= REDUCED_JOINT_COUNT {
            return Err(MotionError::Invalid("episode joint index out of range".into()));
        }
    }

    let style = Style::draw(seed);
    let t_count = cfg.frames;
    let beat_hz = cfg.tempo_bpm / 60.0;
    let pelvis_height = 0.92;

    let mut leader = MotionSequence::zeros(t_count, cfg.fps, sk.joint_count());
    let mut follower = MotionSequence::zeros(t_count, cfg.fps, sk.joint_count());
    let mut leader_rots: Vec<Vec<Mat3>> = Vec::with_capacity(t_count);
    let mut headings = Vec::with_capacity(t_count);

    for t in 0..t_count {
        let sec = t as f64 / cfg.fps;
        // limbs complete one swing cycle every two beats
        let ph = std::f64::consts::TAU * (beat_hz / 2.0) * sec + style.phase;
        let theta = style.path_phase + std::f64::consts::TAU * style.path_speed * sec;
        let heading = theta + std::f64::consts::FRAC_PI_2;
        let root = [
            cfg.path_radius * theta.cos(),
            pelvis_height + style.bob * (std::f64::consts::TAU * beat_hz * sec).sin(),
            cfg.path_radius * theta.sin(),
        ];
        let rots = leader_pose(sk, &style, ph, heading, cfg.swing_amplitude);
        let global = forward_kinematics(sk, &rots, root);
        for j in 0..sk.joint_count() {
            leader.set_local_pos(
                t,
                j,
                [
                    global[j * 3] - root[0],
                    global[j * 3 + 1] - root[1],
                    global[j * 3 + 2] - root[2],
                ],
            );
            let rot6 = rots[j].to_6d();
            leader.rotations[(t * sk.joint_count() + j) * 6..(t * sk.joint_count() + j) * 6 + 6]
                .copy_from_slice(&rot6);
        }
        leader.set_root(t, root);
        leader_rots.push(rots);
        headings.push(heading);
    }

    // Follower: mirrored lagged pose, facing the leader.
    let mut follower_base_root = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let src = t.saturating_sub(cfg.follower_lag);
        let mut rots = mirror_pose(sk, &leader_rots[src]);
        rots[0] = Mat3::rot_y(headings[t] + std::f64::consts::PI);
        let facing = Mat3::rot_y(headings[t]).apply([0.0, 0.0, 1.0]);
        let root = add(leader.root(t), scale(facing, cfg.partner_distance));
        let global = forward_kinematics(sk, &rots, root);
        for j in 0..sk.joint_count() {
            follower.set_local_pos(
                t,
                j,
                [
                    global[j * 3] - root[0],
                    global[j * 3 + 1] - root[1],
                    global[j * 3 + 2] - root[2],
                ],
            );
            let rot6 = rots[j].to_6d();
            follower.rotations[(t * sk.joint_count() + j) * 6..(t * sk.joint_count() + j) * 6 + 6]
                .copy_from_slice(&rot6);
        }
        follower.set_root(t, root);
        follower_base_root.push(root);
    }

    // Episode constraint pass: rigidly shift the follower root.
    if !episodes.is_empty() {
        let hold = cfg.contact_delta / 4.0;
        let limit = cfg.contact_delta / 2.0;
        // target root per (episode, frame) so joint pairs sit at distance `hold`
        let target_for = |ep: &ContactEpisode, t: usize, leader_red: &[f64], follower_red_local: &[f64]| -> Vec3 {
            let anchor = reduced_point(leader_red, ep.leader_joint);
            let joint_local = reduced_point(follower_red_local, ep.follower_joint);
            let away = sub(follower_base_root[t], anchor);
            let n = norm(away);
            let dir = if n > 1e-9 { scale(away, 1.0 / n) } else { [0.0, 0.0, 1.0] };
            sub(add(anchor, scale(dir, hold)), joint_local)
        };
        for t in 0..t_count {
            let leader_red = leader.reduced_global_frame(sk, t);
            let follower_red_local = follower.reduced_local_frame(sk, t);
            let active: Vec<&ContactEpisode> =
                episodes.iter().filter(|e| e.start <= t && t <= e.end).collect();
            let new_root = if !active.is_empty() {
                let mut mean = [0.0; 3];
                for ep in &active {
                    mean = add(mean, target_for(ep, t, &leader_red, &follower_red_local));
                }
                let mean = scale(mean, 1.0 / active.len() as f64);
                // a single rigid shift must satisfy every active episode
                for ep in &active {
                    let jpos = add(mean, reduced_point(&follower_red_local, ep.follower_joint));
                    let d = dist(jpos, reduced_point(&leader_red, ep.leader_joint));
                    if d > limit {
                        return Err(MotionError::InfeasibleEpisodes(format!(
                            "frame {t}: joints {} and {} cannot both be held (violation {:.3} m > {:.3} m)",
                            ep.follower_joint, ep.leader_joint, d, limit
                        )));
                    }
                }
                mean
            } else {
                // smoothstep ramp toward the nearest upcoming/past episode
                let mut weight = 0.0;
                let mut target = follower_base_root[t];
                if cfg.ramp_frames > 0 {
                    for ep in &episodes {
                        let w = if t < ep.start && ep.start - t <= cfg.ramp_frames {
                            smoothstep(1.0 - (ep.start - t) as f64 / cfg.ramp_frames as f64)
                        } else if t > ep.end && t - ep.end <= cfg.ramp_frames {
                            smoothstep(1.0 - (t - ep.end) as f64 / cfg.ramp_frames as f64)
                        } else {
                            0.0
                        };
                        if w > weight {
                            weight = w;
                            target = target_for(ep, t, &leader_red, &follower_red_local);
                        }
                    }
                }
                add(
                    scale(follower_base_root[t], 1.0 - weight),
                    scale(target, weight),
                )
            };
            follower.set_root(t, new_root);
        }
    }

    let contacts = extract_contact(sk, &leader, &follower, cfg.contact_delta)?;
    for ep in &episodes {
        for t in ep.start..=ep.end {
            debug_assert_eq!(
                contacts.get(t, ep.follower_joint, ep.leader_joint),
                1,
                "episode frame {t} not recovered"
            );
        }
    }
    let trajectory = compute_relative_trajectory(&leader, &follower)?;
    let sample = DuetSample {
        leader,
        follower,
        trajectory,
        contacts,
        features: None,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = SynthConfig::default();
        let a = synth_duet(&cfg, 42).unwrap();
        let b = synth_duet(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = synth_duet(&cfg, 43).unwrap();
        assert_ne!(a.leader.local_positions, c.leader.local_positions);
    }

    #[test]
    fn scripted_wrist_contact_is_recovered() {
        let cfg = SynthConfig {
            episodes: EpisodeSpec::Explicit(vec![ContactEpisode {
                follower_joint: reduced::RIGHT_WRIST,
                leader_joint: reduced::RIGHT_WRIST,
                start: 10,
                end: 20,
            }]),
            ..SynthConfig::default()
        };
        let duet = synth_duet(&cfg, 7).unwrap();
        for t in 10..=20 {
            assert_eq!(duet.contacts.get(t, reduced::RIGHT_WRIST, reduced::RIGHT_WRIST), 1, "frame {t}");
        }
    }

    #[test]
    fn bone_lengths_constant_across_frames() {
        let sk = Skeleton::duet54();
        let duet = synth_duet(&SynthConfig::default(), 3).unwrap();
        for seq in [&duet.leader, &duet.follower] {
            let reference = seq.bone_lengths(sk, 0);
            for t in 1..seq.frames {
                let lengths = seq.bone_lengths(sk, t);
                for (a, b) in reference.iter().zip(&lengths) {
                    assert!((a - b).abs() < 1e-6, "bone length drift {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn infeasible_overlapping_episodes_error() {
        // both follower wrists pinned to the same leader wrist over the same
        // frames cannot be satisfied by one rigid shift
        let cfg = SynthConfig {
            episodes: EpisodeSpec::Explicit(vec![
                ContactEpisode {
                    follower_joint: reduced::RIGHT_WRIST,
                    leader_joint: reduced::RIGHT_WRIST,
                    start: 5,
                    end: 15,
                },
                ContactEpisode {
                    follower_joint: reduced::LEFT_WRIST,
                    leader_joint: reduced::RIGHT_WRIST,
                    start: 5,
                    end: 15,
                },
            ]),
            ..SynthConfig::default()
        };
        assert!(matches!(
            synth_duet(&cfg, 1),
            Err(MotionError::InfeasibleEpisodes(_))
        ));
    }

    #[test]
    fn episode_outside_range_rejected() {
        let cfg = SynthConfig {
            frames: 32,
            episodes: EpisodeSpec::Explicit(vec![ContactEpisode {
                follower_joint: 0,
                leader_joint: 0,
                start: 30,
                end: 40,
            }]),
            ..SynthConfig::default()
        };
        assert!(synth_duet(&cfg, 0).is_err());
    }

    #[test]
    fn auto_episodes_are_recovered_by_extraction() {
        let cfg = SynthConfig::default();
        let eps = auto_episodes(&cfg, 5);
        assert!(!eps.is_empty());
        let duet = synth_duet(&cfg, 5).unwrap();
        for ep in eps {
            for t in ep.start..=ep.end {
                assert_eq!(duet.contacts.get(t, ep.follower_joint, ep.leader_joint), 1);
            }
        }
    }
}
