//! Instruction-guided audio editing at desk scale.
//!
//! Triplet synthesis for five editing tasks, a mel front end, a latent codec,
//! a conditional latent diffusion engine with two-condition classifier-free
//! guidance, and the objective metrics used to score edits.

pub mod audio;
pub mod codec;
pub mod diffusion;
pub mod io;
pub mod latent;
pub mod mel;
pub mod metrics;
pub mod pipeline;
pub mod record;
pub mod seed;
pub mod text;
pub mod triplet;

pub use audio::{TimeRegion, Waveform};
pub use codec::{CodecParams, LatentCodec};
pub use latent::Latent;
pub use mel::{MelConfig, MelSpectrogram};
