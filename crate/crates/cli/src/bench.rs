use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::run::{load_boxes, Pipeline};
use crate::{CliError, Result};

/// Fewer repeats than this give a median that is flagged as low confidence.
pub const MIN_CONFIDENT_REPEATS: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub rho: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub repeats: usize,
    pub initial_tokens: usize,
    /// Tokens left after each pruning stage.
    pub token_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub preset: String,
    pub low_confidence: bool,
    pub rows: Vec<BenchRow>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times the post-embedding forward pass at each keep rate. Rounds are
/// interleaved across rates so slow drift in machine load hits all of them.
pub fn cmd_bench(base: &RunConfig, rhos: &[f64], repeats: usize) -> Result<BenchReport> {
    if rhos.is_empty() {
        return Err(CliError::Config("need at least one rho".into()));
    }
    if repeats == 0 {
        return Err(CliError::Config("repeats must be at least 1".into()));
    }
    let low_confidence = repeats < MIN_CONFIDENT_REPEATS;
    if low_confidence {
        warn!("{repeats} repeat(s): medians are low confidence");
    }
    let boxes = load_boxes(base.boxes.as_deref())?;

    let mut setups = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let cfg = RunConfig {
            rho,
            ..base.clone()
        };
        let pipe = Pipeline::build(&cfg)?;
        let tokens = pipe.embed(&pipe.load_clip(&cfg)?)?;
        let warm = pipe.forward(&tokens, &boxes)?;
        let counts: Vec<usize> = warm
            .encoded
            .prune_trace
            .iter()
            .map(|r| r.tokens_after())
            .collect();
        setups.push((pipe, tokens, counts));
    }

    let mut samples = vec![Vec::with_capacity(repeats); rhos.len()];
    for _ in 0..repeats {
        for (i, (pipe, tokens, _)) in setups.iter().enumerate() {
            let t0 = Instant::now();
            let out = pipe.forward(tokens, &boxes)?;
            samples[i].push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
    }

    let rows = rhos
        .iter()
        .zip(setups)
        .zip(samples.iter_mut())
        .map(|((&rho, (pipe, _, counts)), s)| {
            let row = BenchRow {
                rho,
                median_ms: median(s),
                min_ms: s[0],
                max_ms: s[s.len() - 1],
                repeats,
                initial_tokens: pipe.grid.len(),
                token_counts: counts,
            };
            info!(
                "rho={} median={:.3}ms tokens={:?}",
                rho, row.median_ms, row.token_counts
            );
            row
        })
        .collect();
    Ok(BenchReport {
        preset: base.preset.to_string(),
        low_confidence,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_repeat_is_flagged() {
        let rep = cmd_bench(&RunConfig::default(), &[1.0], 1).unwrap();
        assert!(rep.low_confidence);
        assert_eq!(rep.rows[0].initial_tokens, 128);
        assert_eq!(rep.rows[0].token_counts, vec![128, 128]);
    }
}
