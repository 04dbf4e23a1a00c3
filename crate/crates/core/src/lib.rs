//! Efficient video action detection at desk scale.
//!
//! The pipeline embeds a video clip into spatiotemporal cube tokens, runs a
//! plain transformer encoder that drops non-keyframe tokens at scheduled
//! layers, scatters the surviving tokens back into a dense grid, pools actor
//! features with an extended 3D RoIAlign and refines them with a small
//! transformer decoder before a sigmoid classification layer.
//!
//! All model math is generic over [`Scalar`] (`f32` or `f64`). The concrete
//! aliases below fix the scalar to `f64`, which is what the command-line
//! driver and the oracle suite use.
//!
//! [`costmodel`] is independent of the scalar type: it counts
//! multiply-accumulates analytically for full-size configurations.

pub mod costmodel;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod oracle;
pub mod presets;
pub mod pruning;
pub mod refine;
pub mod rng;
pub mod scalar;
pub mod tokenizer;

pub use error::{EvadError, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type LayerParams = numerics::LayerParams<f64>;
pub type AttentionStats = numerics::AttentionStats<f64>;
pub type TokenSet = tokenizer::TokenSet<f64>;
pub type VideoClip = tokenizer::VideoClip<f64>;
pub type EncoderWeights = encoder::EncoderWeights<f64>;
pub type EncoderOutput = encoder::EncoderOutput<f64>;
pub type FeatureGrid = refine::FeatureGrid<f64>;
pub type DecoderWeights = refine::DecoderWeights<f64>;
pub type ClassifierHead = refine::ClassifierHead<f64>;
