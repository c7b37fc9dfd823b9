//! Motion sequences, contact matrices, relative trajectories, and the
//! conversions between global and root-centered representations.

use duet_core::Tensor;

use crate::error::{MotionError, Result};
use crate::math::{dist, sub, Vec3};
use crate::skeleton::{Skeleton, REDUCED_JOINT_COUNT};

/// One dancer's motion: root-centered joint positions, 6-value rotation
/// encodings, and the global root path. All arrays are frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    pub frames: usize,
    /// [T, J, 3], root-centered (root entry is identically zero).
    pub local_positions: Vec<f64>,
    /// [T, J, 6] continuous rotation encoding (two matrix columns).
    pub rotations: Vec<f64>,
    /// [T, 3] global root position.
    pub root_translation: Vec<f64>,
}

impl MotionSequence {
    pub fn zeros(frames: usize, fps: f64, joints: usize) -> Self {
        let mut rotations = vec![0.0; frames * joints * 6];
        // identity encoding: columns (1,0,0) and (0,1,0)
        for t in 0..frames {
            for j in 0..joints {
                rotations[(t * joints + j) * 6] = 1.0;
                rotations[(t * joints + j) * 6 + 4] = 1.0;
            }
        }
        Self {
            fps,
            frames,
            local_positions: vec![0.0; frames * joints * 3],
            rotations,
            root_translation: vec![0.0; frames * 3],
        }
    }

    pub fn joint_count(&self) -> usize {
        if self.frames == 0 {
            0
        } else {
            self.local_positions.len() / (3 * self.frames)
        }
    }

    pub fn local_pos(&self, t: usize, j: usize) -> Vec3 {
        let o = (t * self.joint_count() + j) * 3;
        [
            self.local_positions[o],
            self.local_positions[o + 1],
            self.local_positions[o + 2],
        ]
    }

    pub fn set_local_pos(&mut self, t: usize, j: usize, v: Vec3) {
        let o = (t * self.joint_count() + j) * 3;
        self.local_positions[o..o + 3].copy_from_slice(&v);
    }

    pub fn root(&self, t: usize) -> Vec3 {
        [
            self.root_translation[t * 3],
            self.root_translation[t * 3 + 1],
            self.root_translation[t * 3 + 2],
        ]
    }

    pub fn set_root(&mut self, t: usize, v: Vec3) {
        self.root_translation[t * 3..t * 3 + 3].copy_from_slice(&v);
    }

    pub fn global_pos(&self, t: usize, j: usize) -> Vec3 {
        let l = self.local_pos(t, j);
        let r = self.root(t);
        [l[0] + r[0], l[1] + r[1], l[2] + r[2]]
    }

    /// Global positions of one frame, [J, 3] flattened.
    pub fn global_frame(&self, t: usize) -> Vec<f64> {
        let j = self.joint_count();
        let mut out = Vec::with_capacity(j * 3);
        let r = self.root(t);
        let base = t * j * 3;
        for jj in 0..j {
            let o = base + jj * 3;
            out.push(self.local_positions[o] + r[0]);
            out.push(self.local_positions[o + 1] + r[1]);
            out.push(self.local_positions[o + 2] + r[2]);
        }
        out
    }

    /// Reduced 23-joint global positions of one frame, [23, 3] flattened.
    pub fn reduced_global_frame(&self, sk: &Skeleton, t: usize) -> Vec<f64> {
        sk.reduce_frame(&self.global_frame(t))
    }

    /// Reduced 23-joint root-centered positions of one frame.
    pub fn reduced_local_frame(&self, sk: &Skeleton, t: usize) -> Vec<f64> {
        let j = self.joint_count();
        let base = t * j * 3;
        sk.reduce_frame(&self.local_positions[base..base + j * 3])
    }

    /// Bone lengths per frame; constant for data produced by the generator.
    pub fn bone_lengths(&self, sk: &Skeleton, t: usize) -> Vec<f64> {
        sk.bones()
            .iter()
            .map(|&(j, p)| dist(self.local_pos(t, j), self.local_pos(t, p)))
            .collect()
    }
}

/// Split global [T, J, 3] positions into root-centered locals plus the
/// root path. Exact: adding the translation back restores the input bitwise.
pub fn to_local(global: &[f64], frames: usize, joints: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(global.len(), frames * joints * 3);
    let mut local = vec![0.0; global.len()];
    let mut trans = vec![0.0; frames * 3];
    for t in 0..frames {
        let base = t * joints * 3;
        let root = [global[base], global[base + 1], global[base + 2]];
        trans[t * 3..t * 3 + 3].copy_from_slice(&root);
        for j in 0..joints {
            for d in 0..3 {
                local[base + j * 3 + d] = global[base + j * 3 + d] - root[d];
            }
        }
    }
    (local, trans)
}

/// Inverse of [`to_local`].
pub fn to_global(local: &[f64], trans: &[f64], frames: usize, joints: usize) -> Vec<f64> {
    let mut global = vec![0.0; local.len()];
    for t in 0..frames {
        let base = t * joints * 3;
        for j in 0..joints {
            for d in 0..3 {
                global[base + j * 3 + d] = local[base + j * 3 + d] + trans[t * 3 + d];
            }
        }
    }
    global
}

/// Follower-minus-leader root offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeTrajectory {
    pub offsets: Vec<f64>, // [T, 3]
}

impl RelativeTrajectory {
    pub fn frames(&self) -> usize {
        self.offsets.len() / 3
    }

    pub fn offset(&self, t: usize) -> Vec3 {
        [self.offsets[t * 3], self.offsets[t * 3 + 1], self.offsets[t * 3 + 2]]
    }
}

pub fn compute_relative_trajectory(
    leader: &MotionSequence,
    follower: &MotionSequence,
) -> Result<RelativeTrajectory> {
    if leader.frames != follower.frames {
        return Err(MotionError::FrameMismatch(leader.frames, follower.frames));
    }
    let mut offsets = Vec::with_capacity(leader.frames * 3);
    for t in 0..leader.frames {
        let d = sub(follower.root(t), leader.root(t));
        offsets.extend_from_slice(&d);
    }
    Ok(RelativeTrajectory { offsets })
}

/// Binary follower-joint x leader-joint contact indicators per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactMatrix {
    pub frames: usize,
    /// [T, 23, 23] row-major, follower joint first.
    pub entries: Vec<u8>,
}

impl ContactMatrix {
    pub fn zeros(frames: usize) -> Self {
        Self {
            frames,
            entries: vec![0; frames * REDUCED_JOINT_COUNT * REDUCED_JOINT_COUNT],
        }
    }

    pub fn get(&self, t: usize, follower_joint: usize, leader_joint: usize) -> u8 {
        self.entries[(t * REDUCED_JOINT_COUNT + follower_joint) * REDUCED_JOINT_COUNT + leader_joint]
    }

    pub fn set(&mut self, t: usize, follower_joint: usize, leader_joint: usize, v: u8) {
        self.entries[(t * REDUCED_JOINT_COUNT + follower_joint) * REDUCED_JOINT_COUNT + leader_joint] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.entries.iter().filter(|&&e| e == 1).count()
    }

    /// Per-frame transpose, swapping follower and leader roles.
    pub fn transposed(&self) -> ContactMatrix {
        let mut out = ContactMatrix::zeros(self.frames);
        for t in 0..self.frames {
            for i in 0..REDUCED_JOINT_COUNT {
                for j in 0..REDUCED_JOINT_COUNT {
                    out.set(t, j, i, self.get(t, i, j));
                }
            }
        }
        out
    }

    /// Values as an f64 tensor [T, 23*23] for model consumption.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.entries.iter().map(|&e| e as f64).collect();
        Tensor::new(
            vec![self.frames, REDUCED_JOINT_COUNT * REDUCED_JOINT_COUNT],
            data,
        )
        .expect("contact shape")
    }
}

/// Average each hand's finger joints into one joint; face joints drop out.
/// Input [T, 54, 3] flattened, output [T, 23, 3] flattened.
pub fn reduce_hand_joints(sk: &Skeleton, positions: &[f64], frames: usize) -> Vec<f64> {
    let j = sk.joint_count();
    assert_eq!(positions.len(), frames * j * 3);
    let mut out = Vec::with_capacity(frames * REDUCED_JOINT_COUNT * 3);
    for t in 0..frames {
        let base = t * j * 3;
        out.extend(sk.reduce_frame(&positions[base..base + j * 3]));
    }
    out
}

/// Threshold reduced-joint distances between two global-frame motions.
/// `entries[t, i, j] = 1` iff follower joint i is within `delta` of leader
/// joint j at frame t.
pub fn extract_contact(
    sk: &Skeleton,
    leader: &MotionSequence,
    follower: &MotionSequence,
    delta: f64,
) -> Result<ContactMatrix> {
    if leader.frames != follower.frames {
        return Err(MotionError::FrameMismatch(leader.frames, follower.frames));
    }
    if delta <= 0.0 {
        return Err(MotionError::Invalid(format!("contact threshold must be positive, got {delta}")));
    }
    let mut out = ContactMatrix::zeros(leader.frames);
    for t in 0..leader.frames {
        let lf = leader.reduced_global_frame(sk, t);
        let ff = follower.reduced_global_frame(sk, t);
        for i in 0..REDUCED_JOINT_COUNT {
            let fi = [ff[i * 3], ff[i * 3 + 1], ff[i * 3 + 2]];
            for j in 0..REDUCED_JOINT_COUNT {
                let lj = [lf[j * 3], lf[j * 3 + 1], lf[j * 3 + 2]];
                if dist(fi, lj) <= delta {
                    out.set(t, i, j, 1);
                }
            }
        }
    }
    Ok(out)
}

/// A complete training/evaluation item: both dancers, their relative
/// trajectory, contacts, and optional per-frame audio features.
#[derive(Debug, Clone, PartialEq)]
pub struct DuetSample {
    pub leader: MotionSequence,
    pub follower: MotionSequence,
    pub trajectory: RelativeTrajectory,
    pub contacts: ContactMatrix,
    /// [T, 54] audio features aligned with the motion frames.
    pub features: Option<Tensor>,
}

impl DuetSample {
    pub fn frames(&self) -> usize {
        self.leader.frames
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.leader.frames;
        for (name, frames) in [
            ("follower", self.follower.frames),
            ("trajectory", self.trajectory.frames()),
            ("contacts", self.contacts.frames),
        ] {
            if frames != t {
                return Err(MotionError::Invalid(format!(
                    "duet component '{name}' has {frames} frames, leader has {t}"
                )));
            }
        }
        if (self.leader.fps - self.follower.fps).abs() > 1e-12 {
            return Err(MotionError::Invalid("leader/follower fps differ".into()));
        }
        if let Some(f) = &self.features {
            if f.shape()[0] != t {
                return Err(MotionError::Invalid(format!(
                    "feature block has {} frames, motion has {t}",
                    f.shape()[0]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> impl Rng {
        rand_pcg_like()
    }

    // tests use a tiny deterministic generator to avoid extra dev-deps
    fn rand_pcg_like() -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(99)
    }

    fn random_motion(frames: usize) -> MotionSequence {
        let sk = Skeleton::duet54();
        let mut m = MotionSequence::zeros(frames, 30.0, sk.joint_count());
        let mut r = rng();
        for t in 0..frames {
            m.set_root(t, [r.gen_range(-1.0..1.0), 0.9, r.gen_range(-1.0..1.0)]);
            for j in 1..sk.joint_count() {
                m.set_local_pos(
                    t,
                    j,
                    [
                        r.gen_range(-0.8..0.8),
                        r.gen_range(-0.9..0.9),
                        r.gen_range(-0.5..0.5),
                    ],
                );
            }
        }
        m
    }

    #[test]
    fn reduce_collapses_identical_fingers_to_that_point() {
        let sk = Skeleton::duet54();
        let mut m = MotionSequence::zeros(1, 30.0, sk.joint_count());
        let q = [0.4, 1.2, -0.3];
        for &f in &sk.left_fingers {
            m.set_local_pos(0, f, q);
        }
        let red = m.reduced_local_frame(sk, 0);
        let hand = &red[crate::skeleton::reduced::LEFT_HAND * 3..][..3];
        assert!((hand[0] - q[0]).abs() < 1e-15);
        assert!((hand[1] - q[1]).abs() < 1e-15);
        assert!((hand[2] - q[2]).abs() < 1e-15);
    }

    #[test]
    fn reduce_matches_direct_mean_oracle() {
        let sk = Skeleton::duet54();
        let m = random_motion(3);
        let reduced = reduce_hand_joints(sk, &m.local_positions, m.frames);
        assert_eq!(reduced.len(), 3 * 23 * 3);
        // oracle: arithmetic mean of the finger positions, written out directly
        for t in 0..3 {
            let mut mean = [0.0; 3];
            for &f in &sk.right_fingers {
                let p = m.local_pos(t, f);
                for d in 0..3 {
                    mean[d] += p[d];
                }
            }
            for d in 0..3 {
                mean[d] /= sk.right_fingers.len() as f64;
                let got = reduced[(t * 23 + crate::skeleton::reduced::RIGHT_HAND) * 3 + d];
                assert!((got - mean[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduce_commutes_with_rigid_translation() {
        let sk = Skeleton::duet54();
        let m = random_motion(2);
        let shift = [0.7, -0.2, 1.1];
        let mut shifted = m.clone();
        for t in 0..2 {
            for j in 0..sk.joint_count() {
                let p = m.local_pos(t, j);
                shifted.set_local_pos(t, j, [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]);
            }
        }
        let a = reduce_hand_joints(sk, &m.local_positions, 2);
        let b = reduce_hand_joints(sk, &shifted.local_positions, 2);
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert!((x + shift[i % 3] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn contact_trivial_cases() {
        let sk = Skeleton::duet54();
        let a = MotionSequence::zeros(2, 30.0, sk.joint_count());
        let b = MotionSequence::zeros(2, 30.0, sk.joint_count());
        // coincident dancers: every pair within any positive delta
        let c = extract_contact(sk, &a, &b, 0.1).unwrap();
        assert_eq!(c.get(0, 0, 0), 1);
        // far apart: all zero
        let mut far = b.clone();
        for t in 0..2 {
            far.set_root(t, [100.0, 0.0, 0.0]);
        }
        let c = extract_contact(sk, &a, &far, 0.1).unwrap();
        assert_eq!(c.count_ones(), 0);
    }

    #[test]
    fn contact_matches_bruteforce_oracle() {
        let sk = Skeleton::duet54();
        let leader = random_motion(5);
        let follower = random_motion(5);
        let delta = 0.1;
        let c = extract_contact(sk, &leader, &follower, delta).unwrap();
        for t in 0..5 {
            let lf = leader.reduced_global_frame(sk, t);
            let ff = follower.reduced_global_frame(sk, t);
            for i in 0..23 {
                for j in 0..23 {
                    let d = dist(
                        [ff[i * 3], ff[i * 3 + 1], ff[i * 3 + 2]],
                        [lf[j * 3], lf[j * 3 + 1], lf[j * 3 + 2]],
                    );
                    let expect = if d <= delta { 1 } else { 0 };
                    assert_eq!(c.get(t, i, j), expect, "t={t} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn contact_symmetry_under_role_swap() {
        let sk = Skeleton::duet54();
        let a = random_motion(4);
        let b = random_motion(4);
        let ab = extract_contact(sk, &a, &b, 0.15).unwrap();
        let ba = extract_contact(sk, &b, &a, 0.15).unwrap();
        assert_eq!(ab.entries, ba.transposed().entries);
    }

    #[test]
    fn contact_frame_mismatch_is_an_error() {
        let sk = Skeleton::duet54();
        let a = random_motion(3);
        let b = random_motion(4);
        assert!(matches!(
            extract_contact(sk, &a, &b, 0.1),
            Err(MotionError::FrameMismatch(3, 4))
        ));
    }

    #[test]
    fn relative_trajectory_identity_and_shift() {
        let sk = Skeleton::duet54();
        let a = random_motion(3);
        let same = compute_relative_trajectory(&a, &a).unwrap();
        assert!(same.offsets.iter().all(|&v| v == 0.0));
        let mut shifted = a.clone();
        for t in 0..3 {
            let r = a.root(t);
            shifted.set_root(t, [r[0] + 1.0, r[1], r[2]]);
        }
        let d = compute_relative_trajectory(&a, &shifted).unwrap();
        for t in 0..3 {
            assert_eq!(d.offset(t), [1.0, 0.0, 0.0]);
        }
        // reconstruction: leader root + offset == follower root, exactly
        for t in 0..3 {
            let rebuilt = crate::math::add(a.root(t), d.offset(t));
            assert_eq!(rebuilt, shifted.root(t));
        }
        let _ = sk;
    }

    #[test]
    fn to_local_roundtrip_is_bitwise() {
        let m = random_motion(4);
        let global = {
            let mut g = Vec::new();
            for t in 0..4 {
                g.extend(m.global_frame(t));
            }
            g
        };
        let (local, trans) = to_local(&global, 4, 54);
        // root entry zero
        for t in 0..4 {
            assert_eq!(&local[t * 54 * 3..t * 54 * 3 + 3], &[0.0, 0.0, 0.0]);
        }
        let back = to_global(&local, &trans, 4, 54);
        assert_eq!(back, global);
    }

    #[test]
    fn to_local_static_pose_and_pure_translation() {
        // static pose at the origin: local == global, translation zero
        let global = vec![0.0; 2 * 54 * 3];
        let (local, trans) = to_local(&global, 2, 54);
        assert_eq!(local, global);
        assert!(trans.iter().all(|&v| v == 0.0));
        // pure root translation: locals constant over time
        let sk = Skeleton::duet54();
        let mut m = random_motion(1);
        m.set_root(0, [0.0, 0.0, 0.0]);
        let frame = m.global_frame(0);
        let mut moving = Vec::new();
        for t in 0..3 {
            let shift = t as f64 * 0.5;
            for (i, v) in frame.iter().enumerate() {
                moving.push(v + if i % 3 == 0 { shift } else { 0.0 });
            }
        }
        let (local, _) = to_local(&moving, 3, sk.joint_count());
        let stride = sk.joint_count() * 3;
        for t in 1..3 {
            for i in 0..stride {
                assert!((local[t * stride + i] - local[i]).abs() < 1e-12);
            }
        }
    }
}
