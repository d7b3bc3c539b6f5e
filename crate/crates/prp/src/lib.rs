//! Self-supervised video representation learning by playback-rate
//! perception: models sample videos at several dilation rates, learn to
//! classify the rate, and learn to reconstruct a slowed-down version of
//! the clip under motion-attention weighting. The learned encoder then
//! transfers to action recognition and video retrieval.

pub mod ablation;
pub mod app;
pub mod attention;
pub mod config;
pub mod downstream;
pub mod error;
pub mod guide;
pub mod sampling;
pub mod training;
pub mod video;
pub mod losses;
pub mod models;
pub mod nn;

pub use error::{Error, Result};
