//! Keyframe-centric token pruning.
//!
//! Importance of a non-keyframe token `j` is the weighted column mean of the
//! head-averaged attention map, where rows issued by keyframe queries are
//! scaled by `w_kf`:
//!
//! ```text
//! I_j = (1/N) * ( sum_{i in keyframe} w_kf * attn(i, j) + sum_{i not in keyframe} attn(i, j) )
//! ```
//!
//! All keyframe tokens survive; the top `floor(N * rho) - N1` non-keyframe
//! tokens join them. `N` is the token count at the pruning layer.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{EvadError, Result};
use crate::numerics::AttentionStats;
use crate::rng;
use crate::tokenizer::TokenSet;
use crate::Scalar;

/// Allowed drift of an attention row sum from one.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    /// Keyframe tokens always kept; non-keyframe tokens ranked by `I_j`.
    #[default]
    KeyframeGap,
    /// Every token ranked together, keyframe included (ablation only).
    UnifiedGap,
    /// Seeded uniform sample of non-keyframe tokens.
    Random,
}

impl std::str::FromStr for PruneStrategy {
    type Err = EvadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyframe_gap" | "keyframe" | "gap" => Ok(PruneStrategy::KeyframeGap),
            "unified_gap" | "unified" => Ok(PruneStrategy::UnifiedGap),
            "random" => Ok(PruneStrategy::Random),
            other => Err(EvadError::Config(format!(
                "unknown pruning strategy {other:?}"
            ))),
        }
    }
}

/// Ordering among equal scores. Only `LowerIndexFirst` is a valid build; the
/// other variant exists so the oracle suite can demonstrate it catches a
/// broken tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowerIndexFirst,
    HigherIndexFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub keep_rate: f64,
    pub keyframe_weight: f64,
    #[serde(default)]
    pub strategy: PruneStrategy,
    /// Seed for the random strategy; ignored otherwise.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub tie_break: TieBreak,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            keep_rate: 0.7,
            keyframe_weight: 1.0,
            strategy: PruneStrategy::KeyframeGap,
            seed: 0,
            tie_break: TieBreak::LowerIndexFirst,
        }
    }
}

impl PruneConfig {
    pub fn new(keep_rate: f64, keyframe_weight: f64) -> Result<Self> {
        let cfg = PruneConfig {
            keep_rate,
            keyframe_weight,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_strategy(mut self, strategy: PruneStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(EvadError::Config(format!(
                "keep rate {} must lie in (0, 1]",
                self.keep_rate
            )));
        }
        if !(self.keyframe_weight >= 1.0 && self.keyframe_weight.is_finite()) {
            return Err(EvadError::Config(format!(
                "keyframe weight {} must be finite and >= 1",
                self.keyframe_weight
            )));
        }
        Ok(())
    }
}

/// `floor(n * rho)`. A 1e-9 nudge keeps products such as `100 * 0.29` from
/// landing one below the intended integer.
pub fn kept_count(n: usize, rho: f64) -> usize {
    ((n as f64) * rho + 1e-9).floor() as usize
}

/// Kept count for a keyframe-preserving pruning, or a feasibility error when
/// it would not exceed the keyframe token count.
pub fn check_feasible(n: usize, n_key: usize, rho: f64) -> Result<usize> {
    let kept = kept_count(n, rho);
    if kept <= n_key {
        return Err(EvadError::Feasibility {
            n,
            n_key,
            rho,
            kept,
        });
    }
    Ok(kept)
}

/// Scores aligned with token indices of the current set.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores<T> {
    pub ids: Vec<usize>,
    pub scores: Vec<T>,
}

impl<T: Scalar> ImportanceScores<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<T> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|k| self.scores[k])
    }
}

/// Weighted column means over every column, keyframe columns included.
/// Performs no row-sum check.
pub fn column_importance<T: Scalar>(
    attn: &AttentionStats<T>,
    keyframe_rows: &[bool],
    keyframe_weight: f64,
) -> Vec<T> {
    let n = attn.len();
    let w = T::lit(keyframe_weight);
    let mut sums = vec![T::zero(); n];
    for (i, row) in attn.attn.iter_rows().enumerate() {
        let rw = if keyframe_rows[i] { w } else { T::one() };
        for (s, &a) in sums.iter_mut().zip(row) {
            *s = *s + rw * a;
        }
    }
    let inv_n = T::one() / T::lit(n as f64);
    sums.into_iter().map(|s| s * inv_n).collect()
}

fn check_attention<T: Scalar>(attn: &AttentionStats<T>) -> Result<()> {
    let (r, c) = attn.attn.shape();
    if r != c || r == 0 {
        return Err(EvadError::dim(
            "importance_scores",
            format!("attention map must be square and nonempty, got {r}x{c}"),
        ));
    }
    let err = attn.row_sum_error();
    if err.is_nan() || err > ROW_SUM_TOL {
        return Err(EvadError::Contract(format!(
            "attention rows must sum to one (max deviation {err:e})"
        )));
    }
    Ok(())
}

fn keyframe_mask(n: usize, keyframe_ids: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &k in keyframe_ids {
        if k >= n {
            return Err(EvadError::Contract(format!(
                "keyframe id {k} out of range for {n} tokens"
            )));
        }
        mask[k] = true;
    }
    Ok(mask)
}

/// Keyframe-enhanced importance for every non-keyframe token.
pub fn importance_scores<T: Scalar>(
    attn: &AttentionStats<T>,
    keyframe_ids: &[usize],
    keyframe_weight: f64,
) -> Result<ImportanceScores<T>> {
    check_attention(attn)?;
    let mask = keyframe_mask(attn.len(), keyframe_ids)?;
    let all = column_importance(attn, &mask, keyframe_weight);
    let (ids, scores) = all
        .into_iter()
        .enumerate()
        .filter(|(j, _)| !mask[*j])
        .unzip();
    Ok(ImportanceScores { ids, scores })
}

/// Weighted importance for all `N` tokens, keyframe columns included.
pub fn importance_scores_all<T: Scalar>(
    attn: &AttentionStats<T>,
    keyframe_ids: &[usize],
    keyframe_weight: f64,
) -> Result<ImportanceScores<T>> {
    check_attention(attn)?;
    let mask = keyframe_mask(attn.len(), keyframe_ids)?;
    let scores = column_importance(attn, &mask, keyframe_weight);
    Ok(ImportanceScores {
        ids: (0..attn.len()).collect(),
        scores,
    })
}

/// Ids of the `k` highest scores, ascending.
fn top_k<T: Scalar>(scores: &ImportanceScores<T>, k: usize, tie_break: TieBreak) -> Vec<usize> {
    let mut order: Vec<(usize, T)> = scores
        .ids
        .iter()
        .copied()
        .zip(scores.scores.iter().copied())
        .collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| match tie_break {
                TieBreak::LowerIndexFirst => a.0.cmp(&b.0),
                TieBreak::HigherIndexFirst => b.0.cmp(&a.0),
            })
    });
    let mut kept: Vec<usize> = order.into_iter().take(k).map(|(id, _)| id).collect();
    kept.sort_unstable();
    kept
}

/// Top `floor(N * rho) - N1` non-keyframe tokens, ties to the lower index.
pub fn select_tokens<T: Scalar>(
    scores: &ImportanceScores<T>,
    n: usize,
    n_key: usize,
    rho: f64,
) -> Result<Vec<usize>> {
    select_tokens_with(scores, n, n_key, rho, TieBreak::LowerIndexFirst)
}

pub fn select_tokens_with<T: Scalar>(
    scores: &ImportanceScores<T>,
    n: usize,
    n_key: usize,
    rho: f64,
    tie_break: TieBreak,
) -> Result<Vec<usize>> {
    let kept = check_feasible(n, n_key, rho)?;
    let want = kept - n_key;
    if want > scores.len() {
        return Err(EvadError::Contract(format!(
            "asked to keep {want} non-keyframe tokens but only {} are scored",
            scores.len()
        )));
    }
    Ok(top_k(scores, want, tie_break))
}

/// Unified ranking: top `floor(N * rho)` tokens overall.
pub fn select_unified<T: Scalar>(
    scores: &ImportanceScores<T>,
    rho: f64,
    tie_break: TieBreak,
) -> Result<Vec<usize>> {
    let n = scores.len();
    let kept = kept_count(n, rho);
    if kept == 0 {
        return Err(EvadError::Feasibility {
            n,
            n_key: 0,
            rho,
            kept,
        });
    }
    Ok(top_k(scores, kept, tie_break))
}

/// Seeded uniform sample of `floor(N * rho) - N1` non-keyframe ids, ascending.
pub fn random_select<T: Scalar>(ts: &TokenSet<T>, rho: f64, seed: u64) -> Result<Vec<usize>> {
    let key = ts.keyframe_token_ids();
    let kept = check_feasible(ts.len(), key.len(), rho)?;
    let nonkey: Vec<usize> = (0..ts.len()).filter(|&i| !ts.is_keyframe(i)).collect();
    let mut r = rng::seeded(seed);
    let mut picked: Vec<usize> = index::sample(&mut r, nonkey.len(), kept - key.len())
        .into_iter()
        .map(|k| nonkey[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Keyframe tokens plus `kept_nonkey`, in canonical order.
pub fn apply_prune<T: Scalar>(ts: &TokenSet<T>, kept_nonkey: &[usize]) -> Result<TokenSet<T>> {
    if let Some(&k) = kept_nonkey
        .iter()
        .find(|&&i| i < ts.len() && ts.is_keyframe(i))
    {
        return Err(EvadError::Contract(format!(
            "token {k} is a keyframe token and cannot be listed as a kept non-keyframe token"
        )));
    }
    let mut ids = ts.keyframe_token_ids();
    ids.extend_from_slice(kept_nonkey);
    ts.gather(&ids)
}

/// Outcome of one pruning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision<T> {
    /// Indices into the pre-prune set, ascending.
    pub kept: Vec<usize>,
    /// Empty for the random strategy.
    pub scores: ImportanceScores<T>,
}

/// Runs the configured strategy on one layer's attention map. `stream`
/// decorrelates random draws across layers.
pub fn decide<T: Scalar>(
    ts: &TokenSet<T>,
    attn: &AttentionStats<T>,
    cfg: &PruneConfig,
    stream: u64,
) -> Result<PruneDecision<T>> {
    cfg.validate()?;
    if attn.len() != ts.len() {
        return Err(EvadError::dim(
            "prune",
            format!("{} tokens, attention over {}", ts.len(), attn.len()),
        ));
    }
    let key = ts.keyframe_token_ids();
    match cfg.strategy {
        PruneStrategy::KeyframeGap => {
            let scores = importance_scores(attn, &key, cfg.keyframe_weight)?;
            let nonkey =
                select_tokens_with(&scores, ts.len(), key.len(), cfg.keep_rate, cfg.tie_break)?;
            let mut kept = key;
            kept.extend(nonkey);
            kept.sort_unstable();
            Ok(PruneDecision { kept, scores })
        }
        PruneStrategy::UnifiedGap => {
            let scores = importance_scores_all(attn, &key, cfg.keyframe_weight)?;
            let kept = select_unified(&scores, cfg.keep_rate, cfg.tie_break)?;
            Ok(PruneDecision { kept, scores })
        }
        PruneStrategy::Random => {
            let nonkey = random_select(ts, cfg.keep_rate, rng::derive_seed(cfg.seed, stream))?;
            let mut kept = key;
            kept.extend(nonkey);
            kept.sort_unstable();
            Ok(PruneDecision {
                kept,
                scores: ImportanceScores {
                    ids: Vec::new(),
                    scores: Vec::new(),
                },
            })
        }
    }
}
