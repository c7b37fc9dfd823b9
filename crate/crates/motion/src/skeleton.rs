//! The 54-joint skeleton and its reduced 23-joint contact layout.
//!
//! Layout: 21 core body joints + 3 face joints (jaw, eyes) + 15 finger
//! joints per hand. For contact purposes each hand collapses to the mean of
//! its finger joints and the face joints are dropped, giving the fixed
//! 23-joint order below. Body parts split as upper / lower / left hand /
//! right hand, covering every joint exactly once.

use std::sync::OnceLock;

use crate::error::{MotionError, Result};
use crate::math::Vec3;

pub const JOINT_COUNT: usize = 54;
pub const REDUCED_JOINT_COUNT: usize = 23;
pub const FINGERS_PER_HAND: usize = 15;

/// Fixed reduced-joint order used by contact matrices and metrics.
pub const REDUCED_JOINT_NAMES: [&str; REDUCED_JOINT_COUNT] = [
    "root",
    "spine1",
    "spine2",
    "neck",
    "head",
    "left_collar",
    "right_collar",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_foot",
    "right_foot",
];

/// Reduced indices that are handy to name in code.
pub mod reduced {
    pub const ROOT: usize = 0;
    pub const HEAD: usize = 4;
    pub const LEFT_SHOULDER: usize = 7;
    pub const RIGHT_SHOULDER: usize = 8;
    pub const LEFT_ELBOW: usize = 9;
    pub const RIGHT_ELBOW: usize = 10;
    pub const LEFT_WRIST: usize = 11;
    pub const RIGHT_WRIST: usize = 12;
    pub const LEFT_HAND: usize = 13;
    pub const RIGHT_HAND: usize = 14;
    pub const LEFT_HIP: usize = 15;
    pub const RIGHT_HIP: usize = 16;
    pub const LEFT_KNEE: usize = 17;
    pub const RIGHT_KNEE: usize = 18;
    pub const LEFT_ANKLE: usize = 19;
    pub const RIGHT_ANKLE: usize = 20;
    pub const LEFT_FOOT: usize = 21;
    pub const RIGHT_FOOT: usize = 22;
}

#[derive(Debug, Clone)]
pub struct Skeleton {
    pub name: String,
    pub names: Vec<String>,
    /// Parent index per joint, -1 for the root.
    pub parents: Vec<isize>,
    /// Rest-pose bone offsets from the parent, meters.
    pub rest_offsets: Vec<Vec3>,
    /// Body-part partition: upper, lower, left hand, right hand.
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
    pub left_hand: Vec<usize>,
    pub right_hand: Vec<usize>,
    /// Finger joints averaged into each reduced hand joint.
    pub left_fingers: Vec<usize>,
    pub right_fingers: Vec<usize>,
    /// reduced_source[i] = full-skeleton joints averaged into reduced joint i.
    reduced_source: Vec<Vec<usize>>,
    /// Left/right counterpart per joint (self for centerline joints).
    mirror: Vec<usize>,
}

macro_rules! joints {
    ($(($name:literal, $parent:expr, [$x:expr, $y:expr, $z:expr])),+ $(,)?) => {{
        let mut names: Vec<String> = Vec::new();
        let mut parents: Vec<isize> = Vec::new();
        let mut offsets: Vec<Vec3> = Vec::new();
        $(
            names.push($name.to_string());
            parents.push($parent);
            offsets.push([$x, $y, $z]);
        )+
        (names, parents, offsets)
    }};
}

fn finger_chain(names: &mut Vec<String>, parents: &mut Vec<isize>, offsets: &mut Vec<Vec3>, side: &str, wrist: isize, sign: f64) {
    // (finger, base offset, segment lengths)
    let fingers: [(&str, Vec3, [f64; 2]); 5] = [
        ("thumb", [0.030 * sign, -0.010, 0.035], [0.030, 0.025]),
        ("index", [0.090 * sign, 0.005, 0.025], [0.033, 0.025]),
        ("middle", [0.095 * sign, 0.005, 0.005], [0.035, 0.027]),
        ("ring", [0.090 * sign, 0.003, -0.012], [0.032, 0.024]),
        ("pinky", [0.080 * sign, 0.000, -0.028], [0.028, 0.021]),
    ];
    for (finger, base, segs) in fingers {
        let base_idx = names.len() as isize;
        names.push(format!("{side}_{finger}1"));
        parents.push(wrist);
        offsets.push(base);
        names.push(format!("{side}_{finger}2"));
        parents.push(base_idx);
        offsets.push([segs[0] * sign, 0.0, 0.0]);
        names.push(format!("{side}_{finger}3"));
        parents.push(base_idx + 1);
        offsets.push([segs[1] * sign, 0.0, 0.0]);
    }
}

fn build_duet54() -> Skeleton {
    let (mut names, mut parents, mut offsets) = joints![
        ("root", -1, [0.0, 0.0, 0.0]),
        ("spine1", 0, [0.0, 0.13, 0.0]),
        ("spine2", 1, [0.0, 0.14, 0.0]),
        ("neck", 2, [0.0, 0.16, 0.0]),
        ("head", 3, [0.0, 0.12, 0.0]),
        ("jaw", 4, [0.0, -0.03, 0.08]),
        ("left_eye", 4, [0.035, 0.04, 0.075]),
        ("right_eye", 4, [-0.035, 0.04, 0.075]),
        ("left_collar", 2, [0.085, 0.10, 0.0]),
        ("right_collar", 2, [-0.085, 0.10, 0.0]),
        ("left_shoulder", 8, [0.095, 0.01, 0.0]),
        ("right_shoulder", 9, [-0.095, 0.01, 0.0]),
        ("left_elbow", 10, [0.26, 0.0, 0.0]),
        ("right_elbow", 11, [-0.26, 0.0, 0.0]),
        ("left_wrist", 12, [0.25, 0.0, 0.0]),
        ("right_wrist", 13, [-0.25, 0.0, 0.0]),
        ("left_hip", 0, [0.095, -0.06, 0.0]),
        ("right_hip", 0, [-0.095, -0.06, 0.0]),
        ("left_knee", 16, [0.0, -0.38, 0.0]),
        ("right_knee", 17, [0.0, -0.38, 0.0]),
        ("left_ankle", 18, [0.0, -0.40, 0.0]),
        ("right_ankle", 19, [0.0, -0.40, 0.0]),
        ("left_foot", 20, [0.0, -0.06, 0.13]),
        ("right_foot", 21, [0.0, -0.06, 0.13]),
    ];
    finger_chain(&mut names, &mut parents, &mut offsets, "left", 14, 1.0);
    finger_chain(&mut names, &mut parents, &mut offsets, "right", 15, -1.0);
    assert_eq!(names.len(), JOINT_COUNT);

    let left_fingers: Vec<usize> = (24..24 + FINGERS_PER_HAND).collect();
    let right_fingers: Vec<usize> = (39..39 + FINGERS_PER_HAND).collect();

    let upper: Vec<usize> = (0..14).collect(); // trunk, face, collars, shoulders, elbows
    let lower: Vec<usize> = (16..24).collect(); // hips, knees, ankles, feet
    let mut left_hand = vec![14]; // wrist + fingers
    left_hand.extend(&left_fingers);
    let mut right_hand = vec![15];
    right_hand.extend(&right_fingers);

    // Reduced sources: pass-through body joints, finger means for the hands.
    let by_name = |n: &str| names.iter().position(|x| x == n).unwrap();
    let mut reduced_source: Vec<Vec<usize>> = Vec::with_capacity(REDUCED_JOINT_COUNT);
    for rname in REDUCED_JOINT_NAMES {
        match rname {
            "left_hand" => reduced_source.push(left_fingers.clone()),
            "right_hand" => reduced_source.push(right_fingers.clone()),
            other => reduced_source.push(vec![by_name(other)]),
        }
    }

    let mut mirror: Vec<usize> = (0..JOINT_COUNT).collect();
    for (i, n) in names.iter().enumerate() {
        if let Some(rest) = n.strip_prefix("left_") {
            let j = by_name(&format!("right_{rest}"));
            mirror[i] = j;
            mirror[j] = i;
        }
    }

    let sk = Skeleton {
        name: "duet54".to_string(),
        names,
        parents,
        rest_offsets: offsets,
        upper,
        lower,
        left_hand,
        right_hand,
        left_fingers,
        right_fingers,
        reduced_source,
        mirror,
    };
    sk.validate().expect("built-in skeleton is consistent");
    sk
}

impl Skeleton {
    /// The built-in 54-joint skeleton.
    pub fn duet54() -> &'static Skeleton {
        static SKELETON: OnceLock<Skeleton> = OnceLock::new();
        SKELETON.get_or_init(build_duet54)
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Parts in canonical order (U, D, L, R).
    pub fn parts(&self) -> [&[usize]; 4] {
        [&self.upper, &self.lower, &self.left_hand, &self.right_hand]
    }

    /// (child, parent) pairs for every non-root joint.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 0)
            .map(|(j, &p)| (j, p as usize))
            .collect()
    }

    pub fn mirror_joint(&self, j: usize) -> usize {
        self.mirror[j]
    }

    /// Averaging weights of reduced joint `i` over full joints.
    pub fn reduced_sources(&self) -> &[Vec<usize>] {
        &self.reduced_source
    }

    /// Map full [J, 3] positions of one frame to the reduced [23, 3] layout.
    pub fn reduce_frame(&self, frame: &[f64]) -> Vec<f64> {
        debug_assert_eq!(frame.len(), self.joint_count() * 3);
        let mut out = Vec::with_capacity(REDUCED_JOINT_COUNT * 3);
        for sources in &self.reduced_source {
            let inv = 1.0 / sources.len() as f64;
            for d in 0..3 {
                let mut acc = 0.0;
                for &j in sources {
                    acc += frame[j * 3 + d];
                }
                out.push(acc * inv);
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if self.parents[0] != -1 {
            return Err(MotionError::Invalid("joint 0 must be the root".into()));
        }
        for (i, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(MotionError::Invalid(format!(
                    "joint {i} has invalid parent {p}; parents must precede children"
                )));
            }
        }
        let mut seen = vec![0usize; j];
        for part in self.parts() {
            for &idx in part {
                seen[idx] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(MotionError::Invalid(
                "body-part partition must cover every joint exactly once".into(),
            ));
        }
        for f in &self.left_fingers {
            if !self.left_hand.contains(f) {
                return Err(MotionError::Invalid("left fingers must lie in the left-hand part".into()));
            }
        }
        for f in &self.right_fingers {
            if !self.right_hand.contains(f) {
                return Err(MotionError::Invalid("right fingers must lie in the right-hand part".into()));
            }
        }
        Ok(())
    }
}
