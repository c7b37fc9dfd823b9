//! Two-stage generative model: part-wise vector-quantized autoencoders for
//! motion, trajectory, and contact, plus a conditional latent diffusion
//! model with contact-guided deterministic sampling.

pub mod auxvq;
pub mod backbone;
pub mod bundle;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod partfusion;
pub mod quantize;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use auxvq::{ContactVq, ContactVqConfig, TrajectoryVq, TrajectoryVqConfig};
pub use bundle::{ChannelMap, ConditionBundle, LatentBundle};
pub use denoiser::DenoiserConfig;
pub use diffusion::{epsilon_from_x0, forward_diffuse, Rcdiff, RcdiffConfig};
pub use error::{ModelError, Result};
pub use partfusion::{PartFusionConfig, PartFusionVq, VqMode};
pub use quantize::LatentCode;
pub use sampler::{FrozenPipeline, SampleOutput, Sampler, SamplerConfig};
pub use schedule::NoiseSchedule;
pub use training::{
    condition_for, mean_contact_distance, prepare_diffusion_dataset, train_contact_vq,
    train_diffusion, train_music, train_partfusion, train_trajectory_vq, DiffusionItem,
    EpochStats, MusicPretrainer, TrainSettings,
};
