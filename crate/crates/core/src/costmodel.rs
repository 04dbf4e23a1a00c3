//! Analytic multiply-accumulate counts for the full pipeline.
//!
//! One MAC is counted as one FLOP. Per layer with `N` tokens of width `d`:
//! attention costs `4 N d^2` (qkv and output projections) plus `2 N^2 d`
//! (scores and weighted sum); the FFN costs `8 N d^2`. Inside a pruning
//! layer the attention is charged at the pre-prune count and the FFN at the
//! post-prune count. The decoder runs over `n + M` tokens at width `d'`
//! after a shared `d -> d'` projection, and the localization branch is a
//! fixed 13.5 GFLOPs.

use serde::{Deserialize, Serialize};

use crate::error::{EvadError, Result};
use crate::pruning::{self, PruneStrategy};
use crate::tokenizer::{GridShape, CUBE_LEN};

pub const LOC_BRANCH_GFLOPS: f64 = 13.5;

pub const CONVENTION: &str = "1 multiply-accumulate = 1 FLOP; attention 4*N*d^2 + 2*N^2*d, \
FFN 8*N*d^2, cube embedding N*1536*d, decoder input projection (n+M)*d*d'; \
layer norm, softmax, GELU, bias and classifier costs omitted; \
localization branch charged as a constant";

pub fn flops_linear(tokens: u64, d_in: u64, d_out: u64) -> u64 {
    tokens * d_in * d_out
}

/// Attention sub-block of one layer: projections plus score/value products.
pub fn flops_attention_layer(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

pub fn flops_ffn(n: u64, d: u64) -> u64 {
    8 * n * d * d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub keep_rate: f64,
    pub prune_layers: Vec<usize>,
    pub queries: usize,
    pub loc_gflops: f64,
    /// Keyframe-preserving strategies need `floor(N rho) > N1` at every
    /// pruning; the unified strategy only needs a nonzero count.
    #[serde(default)]
    pub strategy: PruneStrategy,
}

impl CostConfig {
    pub fn vitb(resolution: usize, keep_rate: f64) -> Self {
        CostConfig {
            depth: 12,
            dim: 768,
            heads: 12,
            decoder_dim: 384,
            decoder_depth: 6,
            frames: 16,
            height: resolution,
            width: resolution,
            keep_rate,
            prune_layers: vec![4, 7, 10],
            queries: 100,
            loc_gflops: LOC_BRANCH_GFLOPS,
            strategy: PruneStrategy::KeyframeGap,
        }
    }

    pub fn vitl(resolution: usize, keep_rate: f64) -> Self {
        CostConfig {
            depth: 24,
            dim: 1024,
            heads: 16,
            decoder_dim: 512,
            decoder_depth: 12,
            prune_layers: vec![7, 13, 19],
            ..Self::vitb(resolution, keep_rate)
        }
    }

    pub fn grid(&self) -> Result<GridShape> {
        GridShape::for_clip(self.frames, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(EvadError::Config(format!(
                "keep rate {} must lie in (0, 1]",
                self.keep_rate
            )));
        }
        if self.prune_layers.windows(2).any(|w| w[0] >= w[1])
            || self.prune_layers.iter().any(|&l| l == 0 || l > self.depth)
        {
            return Err(EvadError::Config(format!(
                "pruning layers {:?} must be strictly increasing within 1..={}",
                self.prune_layers, self.depth
            )));
        }
        self.grid().map(|_| ())
    }

    /// Token count entering each layer's FFN, for layers 1..=depth.
    pub fn ffn_token_counts(&self) -> Result<Vec<usize>> {
        let grid = self.grid()?;
        let n_key = grid.slice_len();
        let mut n = grid.len();
        let mut out = Vec::with_capacity(self.depth);
        for layer in 1..=self.depth {
            if self.prune_layers.contains(&layer) {
                n = match self.strategy {
                    PruneStrategy::UnifiedGap => match pruning::kept_count(n, self.keep_rate) {
                        0 => {
                            return Err(EvadError::Feasibility {
                                n,
                                n_key: 0,
                                rho: self.keep_rate,
                                kept: 0,
                            })
                        }
                        k => k,
                    },
                    _ => pruning::check_feasible(n, n_key, self.keep_rate)?,
                };
            }
            out.push(n);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embed,
    Attn,
    Ffn,
    Decoder,
    Loc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsEntry {
    /// 1-based layer; 0 for the embedding, decoder projection and
    /// localization entries.
    pub layer: usize,
    pub component: Component,
    pub tokens: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub config: CostConfig,
    pub entries: Vec<FlopsEntry>,
    pub encoder_gflops: f64,
    pub decoder_gflops: f64,
    pub loc_gflops: f64,
    pub total_gflops: f64,
    /// Tokens left after the last pruning.
    pub final_tokens: usize,
    pub convention: String,
}

fn gflops(macs: u64) -> f64 {
    macs as f64 * 1e-9
}

impl FlopsReport {
    pub fn component_gflops(&self, c: Component) -> f64 {
        gflops(
            self.entries
                .iter()
                .filter(|e| e.component == c)
                .map(|e| e.macs)
                .sum(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn flops_total(cfg: &CostConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let d = cfg.dim as u64;
    let mut entries = Vec::with_capacity(2 * cfg.depth + 4);

    let n0 = grid.len();
    entries.push(FlopsEntry {
        layer: 0,
        component: Component::Embed,
        tokens: n0,
        macs: flops_linear(n0 as u64, CUBE_LEN as u64, d),
    });
    let mut n = n0;
    for (i, &n_ffn) in cfg.ffn_token_counts()?.iter().enumerate() {
        entries.push(FlopsEntry {
            layer: i + 1,
            component: Component::Attn,
            tokens: n,
            macs: flops_attention_layer(n as u64, d),
        });
        entries.push(FlopsEntry {
            layer: i + 1,
            component: Component::Ffn,
            tokens: n_ffn,
            macs: flops_ffn(n_ffn as u64, d),
        });
        n = n_ffn;
    }
    let final_tokens = n;

    let seq = (cfg.queries + final_tokens) as u64;
    let dd = cfg.decoder_dim as u64;
    entries.push(FlopsEntry {
        layer: 0,
        component: Component::Decoder,
        tokens: seq as usize,
        macs: flops_linear(seq, d, dd),
    });
    for l in 0..cfg.decoder_depth {
        entries.push(FlopsEntry {
            layer: l + 1,
            component: Component::Decoder,
            tokens: seq as usize,
            macs: flops_attention_layer(seq, dd) + flops_ffn(seq, dd),
        });
    }
    let loc_macs = (cfg.loc_gflops * 1e9).round() as u64;
    entries.push(FlopsEntry {
        layer: 0,
        component: Component::Loc,
        tokens: 0,
        macs: loc_macs,
    });

    let sum = |pred: &dyn Fn(Component) -> bool| -> u64 {
        entries
            .iter()
            .filter(|e| pred(e.component))
            .map(|e| e.macs)
            .sum()
    };
    let encoder = sum(&|c| matches!(c, Component::Embed | Component::Attn | Component::Ffn));
    let decoder = sum(&|c| c == Component::Decoder);
    let total = sum(&|_| true);
    Ok(FlopsReport {
        config: cfg.clone(),
        encoder_gflops: gflops(encoder),
        decoder_gflops: gflops(decoder),
        loc_gflops: gflops(loc_macs),
        total_gflops: gflops(total),
        final_tokens,
        convention: CONVENTION.to_string(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(flops_linear(10, 4, 8), 320);
        assert_eq!(flops_linear(0, 7, 9), 0);
        assert_eq!(flops_linear(1568, 768, 2304), 2_774_532_096);
        assert_eq!(flops_attention_layer(2, 4), 160);
        let layer = flops_attention_layer(1568, 768) + flops_ffn(1568, 768);
        assert!((layer as f64 - 1.487e10).abs() / 1.487e10 < 1e-3);
    }

    #[test]
    fn encoder_only_vitb() {
        let r = flops_total(&CostConfig::vitb(224, 1.0)).unwrap();
        assert!((r.encoder_gflops - 180.34).abs() < 0.01);
        assert!((r.decoder_gflops - 31.02).abs() < 0.01);
        assert_eq!(r.loc_gflops, 13.5);
    }

    #[test]
    fn token_counts_follow_floor_recursion() {
        let cfg = CostConfig::vitb(224, 0.7);
        let counts = cfg.ffn_token_counts().unwrap();
        assert_eq!(counts[2], 1568);
        assert_eq!(counts[3], 1097);
        assert_eq!(counts[6], 767);
        assert_eq!(counts[9], 536);
        assert_eq!(counts[11], 536);
        let r = flops_total(&cfg).unwrap();
        assert_eq!(r.final_tokens, 536);
        let attn4 = r
            .entries
            .iter()
            .find(|e| e.layer == 4 && e.component == Component::Attn)
            .unwrap();
        assert_eq!(attn4.tokens, 1568);
    }

    #[test]
    fn decomposition() {
        for rho in [1.0, 0.8, 0.6] {
            let r = flops_total(&CostConfig::vitb(288, rho)).unwrap();
            let parts = r.encoder_gflops + r.decoder_gflops + r.loc_gflops;
            assert!((parts - r.total_gflops).abs() < 1e-9);
            let by_entry: u64 = r.entries.iter().map(|e| e.macs).sum();
            assert!((gflops(by_entry) - r.total_gflops).abs() < 1e-9);
            let no_dec = r.total_gflops - r.component_gflops(Component::Decoder);
            assert!((no_dec - (r.encoder_gflops + r.loc_gflops)).abs() < 1e-9);
        }
    }

    #[test]
    fn monotone_in_rate_resolution_and_depth() {
        let rhos = [0.6, 0.65, 0.7, 0.8, 0.9, 1.0];
        for res in [224, 256, 288] {
            let totals: Vec<f64> = rhos
                .iter()
                .map(|&r| flops_total(&CostConfig::vitb(res, r)).unwrap().total_gflops)
                .collect();
            assert!(totals.windows(2).all(|w| w[0] <= w[1]), "{totals:?}");
        }
        for rho in rhos {
            let a = flops_total(&CostConfig::vitb(224, rho))
                .unwrap()
                .total_gflops;
            let b = flops_total(&CostConfig::vitb(256, rho))
                .unwrap()
                .total_gflops;
            let c = flops_total(&CostConfig::vitb(288, rho))
                .unwrap()
                .total_gflops;
            assert!(a <= b && b <= c);
            let mut deep = CostConfig::vitb(224, rho);
            deep.depth = 16;
            assert!(flops_total(&deep).unwrap().total_gflops >= a);
        }
    }

    #[test]
    fn rejects_infeasible_and_bad_configs() {
        assert!(matches!(
            flops_total(&CostConfig::vitb(224, 0.2)),
            Err(EvadError::Feasibility { .. })
        ));
        assert!(flops_total(&CostConfig::vitb(230, 0.7)).is_err());
        let mut bad = CostConfig::vitb(224, 0.7);
        bad.prune_layers = vec![7, 4];
        assert!(matches!(flops_total(&bad), Err(EvadError::Config(_))));
    }

    #[test]
    fn json_report_round_trips() {
        let r = flops_total(&CostConfig::vitl(224, 0.7)).unwrap();
        let back: FlopsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
