use std::path::{Path, PathBuf};

use evad_core::presets::ModelPreset;
use evad_core::pruning::PruneStrategy;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Everything a `run` depends on. Outputs are a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: ModelPreset,
    /// Input frames; defaults to the preset's clip length.
    pub frames: Option<usize>,
    /// Square input side in pixels; defaults to the preset's.
    pub resolution: Option<usize>,
    pub rho: f64,
    pub wkf: f64,
    pub strategy: PruneStrategy,
    pub prune_layers: Option<Vec<usize>>,
    /// Keyframe tubelet; defaults to the middle one.
    pub keyframe_t: Option<usize>,
    pub seed: u64,
    /// JSON array of `[x1, y1, x2, y2]` normalized boxes.
    pub boxes: Option<PathBuf>,
    /// RoI extension ratios `(ex, ey)`.
    pub extend: [f64; 2],
    /// Raw clip file; a synthetic clip is generated from `seed` otherwise.
    pub clip: Option<PathBuf>,
    /// Encoder weight blob; seeded weights otherwise.
    pub weights: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: ModelPreset::Tiny,
            frames: None,
            resolution: None,
            rho: 0.7,
            wkf: 1.0,
            strategy: PruneStrategy::KeyframeGap,
            prune_layers: None,
            keyframe_t: None,
            seed: 0,
            boxes: None,
            extend: [0.4, 0.2],
            clip: None,
            weights: None,
            out: PathBuf::from("evad-out"),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn frames(&self) -> usize {
        self.frames
            .unwrap_or_else(|| self.preset.exec_shape().frames)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
            .unwrap_or_else(|| self.preset.exec_shape().resolution)
    }

    pub fn prune_layers(&self) -> Vec<usize> {
        self.prune_layers
            .clone()
            .unwrap_or_else(|| self.preset.exec_shape().prune_layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_with_partial_fields() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"preset": "vitb", "rho": 0.6, "strategy": "random"}"#)
                .unwrap();
        assert_eq!(cfg.preset, ModelPreset::Vitb);
        assert_eq!(cfg.rho, 0.6);
        assert_eq!(cfg.strategy, PruneStrategy::Random);
        assert_eq!(cfg.wkf, 1.0);
        assert_eq!(cfg.resolution(), 224);
        assert_eq!(cfg.prune_layers(), vec![4, 7, 10]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
