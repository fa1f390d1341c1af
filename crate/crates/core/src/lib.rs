//! Genre-conditioned music-to-dance generation: audio features, a genre
//! token network, half-body pose codebooks, a cross-conditional GPT, the
//! training stages that tie them together, and motion metrics.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod generate;
pub mod genre;
pub mod gpt;
pub mod gtn;
pub mod metrics;
pub mod pose;
pub mod selfcheck;
pub mod synth;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
