//! Audio-side components: a fixed 54-channel per-frame feature extractor
//! and the transformer encoder that maps features to the latent frame rate.

pub mod encoder;
pub mod error;
pub mod features;

pub use encoder::{build_encoder, MusicEncoder, MusicEncoderConfig};
pub use error::{MusicError, Result};
pub use features::{
    beats_from_features, extract_features, synth_click_track, MusicFeatures, CHANNELS,
};
