//! Named model configurations.
//!
//! Each preset has a full-size architecture, used by the cost model, and an
//! execution shape with the same depth, token grid and pruning schedule but
//! a narrow width so that forward passes run on a laptop CPU.

use serde::{Deserialize, Serialize};

use crate::costmodel::CostConfig;
use crate::error::{EvadError, Result};
use crate::refine::DecoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Vitb,
    Vitl,
    Tiny,
}

impl std::str::FromStr for ModelPreset {
    type Err = EvadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vitb" | "vit-b" => Ok(ModelPreset::Vitb),
            "vitl" | "vit-l" => Ok(ModelPreset::Vitl),
            "tiny" => Ok(ModelPreset::Tiny),
            other => Err(EvadError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelPreset::Vitb => "vitb",
            ModelPreset::Vitl => "vitl",
            ModelPreset::Tiny => "tiny",
        })
    }
}

/// Shape of a model as it is actually executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecShape {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub prune_layers: Vec<usize>,
    pub decoder: DecoderConfig,
    pub frames: usize,
    pub resolution: usize,
    pub classes: usize,
}

/// AVA action classes.
pub const DEFAULT_CLASSES: usize = 80;

impl ModelPreset {
    pub fn exec_shape(self) -> ExecShape {
        match self {
            ModelPreset::Vitb => ExecShape {
                depth: 12,
                dim: 64,
                heads: 4,
                prune_layers: vec![4, 7, 10],
                decoder: DecoderConfig {
                    dim: 32,
                    depth: 6,
                    heads: 4,
                    queries: 100,
                },
                frames: 16,
                resolution: 224,
                classes: DEFAULT_CLASSES,
            },
            ModelPreset::Vitl => ExecShape {
                depth: 24,
                dim: 64,
                heads: 4,
                prune_layers: vec![7, 13, 19],
                decoder: DecoderConfig {
                    dim: 32,
                    depth: 12,
                    heads: 4,
                    queries: 100,
                },
                frames: 16,
                resolution: 224,
                classes: DEFAULT_CLASSES,
            },
            ModelPreset::Tiny => ExecShape {
                depth: 4,
                dim: 32,
                heads: 2,
                prune_layers: vec![2, 3],
                decoder: DecoderConfig {
                    dim: 16,
                    depth: 2,
                    heads: 2,
                    queries: 100,
                },
                frames: 16,
                resolution: 64,
                classes: DEFAULT_CLASSES,
            },
        }
    }

    /// Full-size architecture at a square `resolution` and keep rate.
    pub fn cost_config(self, resolution: usize, keep_rate: f64) -> CostConfig {
        match self {
            ModelPreset::Vitb => CostConfig::vitb(resolution, keep_rate),
            ModelPreset::Vitl => CostConfig::vitl(resolution, keep_rate),
            ModelPreset::Tiny => {
                let s = self.exec_shape();
                CostConfig {
                    depth: s.depth,
                    dim: s.dim,
                    heads: s.heads,
                    decoder_dim: s.decoder.dim,
                    decoder_depth: s.decoder.depth,
                    frames: s.frames,
                    prune_layers: s.prune_layers,
                    ..CostConfig::vitb(resolution, keep_rate)
                }
            }
        }
    }
}
