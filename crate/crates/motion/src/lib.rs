//! Skeletal motion data for duet sequences: the 54-joint skeleton, contact
//! matrices, relative trajectories, a procedural duet generator, and the
//! text container format that ties them together on disk.

pub mod error;
pub mod import;
pub mod io;
pub mod math;
pub mod sequence;
pub mod skeleton;
pub mod synth;

pub use error::{MotionError, Result};
pub use sequence::{
    compute_relative_trajectory, extract_contact, reduce_hand_joints, ContactMatrix, DuetSample,
    MotionSequence, RelativeTrajectory,
};
pub use skeleton::{Skeleton, JOINT_COUNT, REDUCED_JOINT_COUNT};
pub use synth::{synth_duet, ContactEpisode, EpisodeSpec, SynthConfig};
