//! Pre-norm transformer encoder with keyframe-centric pruning hooks.
//!
//! Each layer computes `x + MHSA(LN(x))`; when the layer is scheduled for
//! pruning, that same layer's head-averaged attention ranks the tokens and
//! only survivors go through `x + FFN(LN(x))`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EvadError, Result};
use crate::numerics::{AttentionStats, LayerNorm, LayerParams, Linear, Matrix};
use crate::pruning::{self, ImportanceScores, PruneConfig, PruneDecision, PruneStrategy};
use crate::rng;
use crate::tokenizer::{CubeEmbed, GridPos, TokenSet, CUBE_LEN};
use crate::Scalar;

const BLOB_MAGIC: &[u8; 8] = b"EVADENC1";

/// 1-based pruning layers: explicit lists for 12 and 24 layers, otherwise
/// first at `ceil(L/3)` and then every `round(L/4)` layers.
pub fn default_schedule(depth: usize) -> Result<Vec<usize>> {
    match depth {
        0..=3 => Err(EvadError::Config(format!(
            "a pruning schedule needs at least 4 layers, got {depth}"
        ))),
        12 => Ok(vec![4, 7, 10]),
        24 => Ok(vec![7, 13, 19]),
        _ => {
            let first = depth.div_ceil(3);
            let step = (depth as f64 / 4.0).round() as usize;
            Ok((0..3)
                .map(|k| first + k * step)
                .filter(|&l| l <= depth)
                .collect())
        }
    }
}

/// Stage ends: the layer before each pruning layer, plus the last layer.
pub fn default_stage_boundaries(depth: usize, prune_layers: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = prune_layers
        .iter()
        .filter(|&&p| p > 1)
        .map(|&p| p - 1)
        .collect();
    out.push(depth);
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// 1-based, strictly increasing.
    pub prune_layers: Vec<usize>,
    pub prune: PruneConfig,
    /// 1-based layers after which keyframe features are tapped.
    pub stage_boundaries: Vec<usize>,
}

impl EncoderConfig {
    /// Config with the default schedule and stage boundaries for `depth`.
    pub fn new(depth: usize, dim: usize, heads: usize, prune: PruneConfig) -> Result<Self> {
        let prune_layers = default_schedule(depth)?;
        let cfg = EncoderConfig {
            depth,
            dim,
            heads,
            stage_boundaries: default_stage_boundaries(depth, &prune_layers),
            prune_layers,
            prune,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_prune_layers(mut self, layers: Vec<usize>) -> Result<Self> {
        self.stage_boundaries = default_stage_boundaries(self.depth, &layers);
        self.prune_layers = layers;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(EvadError::Config("encoder depth must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(EvadError::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.prune_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvadError::Config(format!(
                "pruning layers {:?} must be strictly increasing",
                self.prune_layers
            )));
        }
        if let Some(&bad) = self
            .prune_layers
            .iter()
            .chain(&self.stage_boundaries)
            .find(|&&l| l == 0 || l > self.depth)
        {
            return Err(EvadError::Config(format!(
                "layer index {bad} outside 1..={}",
                self.depth
            )));
        }
        self.prune.validate()
    }

    pub fn prunes_at(&self, layer: usize) -> bool {
        self.prune_layers.binary_search(&layer).is_ok()
    }

    /// Token counts after each scheduled pruning, starting from `n` tokens of
    /// which `n_key` are keyframe tokens. Fails on the first infeasible step.
    pub fn token_schedule(&self, n: usize, n_key: usize) -> Result<Vec<usize>> {
        let mut counts = Vec::with_capacity(self.prune_layers.len());
        let mut cur = n;
        for _ in &self.prune_layers {
            cur = match self.prune.strategy {
                PruneStrategy::UnifiedGap => {
                    let k = pruning::kept_count(cur, self.prune.keep_rate);
                    if k == 0 {
                        return Err(EvadError::Feasibility {
                            n: cur,
                            n_key: 0,
                            rho: self.prune.keep_rate,
                            kept: 0,
                        });
                    }
                    k
                }
                _ => pruning::check_feasible(cur, n_key, self.prune.keep_rate)?,
            };
            counts.push(cur);
        }
        Ok(counts)
    }
}

/// Cube embedding, transformer layers and the closing layer norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights<T> {
    pub embed: CubeEmbed<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: LayerNorm<T>,
}

impl<T: Scalar> EncoderWeights<T> {
    /// Seeded uniform initialization in `[-scale, scale]`.
    pub fn random(seed: u64, depth: usize, dim: usize, heads: usize, scale: f64) -> Self {
        let mut r = rng::seeded(seed);
        let embed = CubeEmbed::random(&mut r, dim, scale);
        let layers = (0..depth)
            .map(|_| LayerParams::random(&mut r, dim, heads, scale))
            .collect();
        EncoderWeights {
            embed,
            layers,
            final_norm: LayerNorm::unit(dim),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.final_norm.dim()
    }

    pub fn check_against(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.depth() != cfg.depth || self.dim() != cfg.dim || self.embed.dim() != cfg.dim {
            return Err(EvadError::Config(format!(
                "weights are {} layers x {} dims, config wants {} x {}",
                self.depth(),
                self.dim(),
                cfg.depth,
                cfg.dim
            )));
        }
        for l in &self.layers {
            if l.heads != cfg.heads {
                return Err(EvadError::Config(format!(
                    "weights use {} heads, config wants {}",
                    l.heads, cfg.heads
                )));
            }
            l.validate()?;
        }
        Ok(())
    }

    /// Blob layout, all little-endian: magic `EVADENC1`; `u64` depth, dim,
    /// heads; then `f64` values of the embedding weight (row-major
    /// `1536 x d`) and bias; then per layer norm1 scale/shift, qkv
    /// weight/bias, proj weight/bias, norm2 scale/shift, fc1 weight/bias,
    /// fc2 weight/bias; then the final norm scale/shift.
    pub fn write_blob(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(BLOB_MAGIC)?;
        let heads = self.layers.first().map_or(1, |l| l.heads);
        for v in [self.depth(), self.dim(), heads] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let mut put = |xs: &[T]| -> std::io::Result<()> {
            for &x in xs {
                w.write_all(&x.as_f64().to_le_bytes())?;
            }
            Ok(())
        };
        put_linear(&mut put, &self.embed.proj)?;
        for l in &self.layers {
            put(&l.norm1.gamma)?;
            put(&l.norm1.beta)?;
            put_linear(&mut put, &l.qkv)?;
            put_linear(&mut put, &l.proj)?;
            put(&l.norm2.gamma)?;
            put(&l.norm2.beta)?;
            put_linear(&mut put, &l.fc1)?;
            put_linear(&mut put, &l.fc2)?;
        }
        put(&self.final_norm.gamma)?;
        put(&self.final_norm.beta)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_blob(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < 32 || &bytes[..8] != BLOB_MAGIC {
            return Err(EvadError::Config(format!(
                "{} is not an encoder weight blob",
                path.display()
            )));
        }
        let word = |k: usize| {
            u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap()) as usize
        };
        let (depth, dim, heads) = (word(0), word(1), word(2));
        let mut cur = BlobCursor {
            bytes: &bytes[32..],
            at: 0,
        };
        let embed = CubeEmbed::new(cur.linear(CUBE_LEN, dim)?)?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            let norm1 = LayerNorm {
                gamma: cur.vec(dim)?,
                beta: cur.vec(dim)?,
            };
            let qkv = cur.linear(dim, 3 * dim)?;
            let proj = cur.linear(dim, dim)?;
            let norm2 = LayerNorm {
                gamma: cur.vec(dim)?,
                beta: cur.vec(dim)?,
            };
            let fc1 = cur.linear(dim, 4 * dim)?;
            let fc2 = cur.linear(4 * dim, dim)?;
            let l = LayerParams {
                heads,
                norm1,
                qkv,
                proj,
                norm2,
                fc1,
                fc2,
            };
            l.validate()?;
            layers.push(l);
        }
        let final_norm = LayerNorm {
            gamma: cur.vec(dim)?,
            beta: cur.vec(dim)?,
        };
        if cur.at != cur.bytes.len() {
            return Err(EvadError::dim(
                "read_blob",
                format!("{} trailing bytes", cur.bytes.len() - cur.at),
            ));
        }
        Ok(EncoderWeights {
            embed,
            layers,
            final_norm,
        })
    }
}

fn put_linear<T: Scalar>(
    put: &mut impl FnMut(&[T]) -> std::io::Result<()>,
    lin: &Linear<T>,
) -> std::io::Result<()> {
    put(lin.weight.data())?;
    put(&lin.bias)
}

struct BlobCursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl BlobCursor<'_> {
    fn vec<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let end = self.at + 8 * n;
        if end > self.bytes.len() {
            return Err(EvadError::dim("read_blob", "blob truncated"));
        }
        let out = self.bytes[self.at..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        self.at = end;
        Ok(out)
    }

    fn linear<T: Scalar>(&mut self, d_in: usize, d_out: usize) -> Result<Linear<T>> {
        let w = Matrix::from_vec(d_in, d_out, self.vec(d_in * d_out)?)?;
        Linear::new(w, self.vec(d_out)?)
    }
}

/// One entry of the prune trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneRecord<T> {
    /// 1-based layer index.
    pub layer: usize,
    pub tokens_before: usize,
    /// Indices into the pre-prune token set, ascending.
    pub kept: Vec<usize>,
    pub kept_positions: Vec<GridPos>,
    pub scores: ImportanceScores<T>,
}

impl<T> PruneRecord<T> {
    pub fn tokens_after(&self) -> usize {
        self.kept.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeTap<T> {
    pub layer: usize,
    /// Keyframe token rows after the layer, in canonical order.
    pub features: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// Surviving tokens after the final layer norm.
    pub tokens: TokenSet<T>,
    pub keyframe_taps: Vec<KeyframeTap<T>>,
    pub prune_trace: Vec<PruneRecord<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput<T> {
    pub tokens: TokenSet<T>,
    pub attention: AttentionStats<T>,
    pub decision: Option<PruneDecision<T>>,
}

/// One pre-norm layer. With `prune` set, tokens are pruned between the
/// attention and FFN sub-blocks using this layer's attention. `stream`
/// decorrelates random pruning across layers.
pub fn encoder_layer<T: Scalar>(
    ts: &TokenSet<T>,
    params: &LayerParams<T>,
    prune: Option<&PruneConfig>,
    stream: u64,
) -> Result<LayerOutput<T>> {
    if ts.is_empty() {
        return Err(EvadError::Contract(
            "encoder layer needs at least one token".into(),
        ));
    }
    let (x, attention) = params.attention_block(ts.values())?;
    let mid = ts.with_values(x)?;
    let (mid, decision) = match prune {
        Some(cfg) => {
            let d = pruning::decide(&mid, &attention, cfg, stream)?;
            (mid.gather(&d.kept)?, Some(d))
        }
        None => (mid, None),
    };
    let out = params.ffn_block(mid.values())?;
    Ok(LayerOutput {
        tokens: mid.with_values(out)?,
        attention,
        decision,
    })
}

/// Runs all layers, pruning where scheduled, then applies the final norm.
pub fn run_encoder<T: Scalar>(
    ts: &TokenSet<T>,
    cfg: &EncoderConfig,
    weights: &EncoderWeights<T>,
) -> Result<EncoderOutput<T>> {
    cfg.validate()?;
    weights.check_against(cfg)?;
    if ts.dim() != cfg.dim {
        return Err(EvadError::dim(
            "run_encoder",
            format!("tokens have width {}, encoder dim is {}", ts.dim(), cfg.dim),
        ));
    }
    let mut cur = ts.clone();
    let mut trace = Vec::with_capacity(cfg.prune_layers.len());
    let mut taps = Vec::with_capacity(cfg.stage_boundaries.len());
    for (i, params) in weights.layers.iter().enumerate() {
        let layer = i + 1;
        let prune = cfg.prunes_at(layer).then_some(&cfg.prune);
        let tokens_before = cur.len();
        let out = encoder_layer(&cur, params, prune, layer as u64)?;
        if let Some(d) = out.decision {
            trace.push(PruneRecord {
                layer,
                tokens_before,
                kept_positions: out.tokens.positions().to_vec(),
                kept: d.kept,
                scores: d.scores,
            });
        }
        cur = out.tokens;
        if cfg.stage_boundaries.contains(&layer) {
            taps.push(KeyframeTap {
                layer,
                features: cur.values().select_rows(&cur.keyframe_token_ids()),
            });
        }
    }
    let values = weights.final_norm.forward(cur.values())?;
    Ok(EncoderOutput {
        tokens: cur.with_values(values)?,
        keyframe_taps: taps,
        prune_trace: trace,
    })
}
