use std::io::Write;

use evad_core::costmodel::{flops_total, FlopsReport};
use evad_core::presets::ModelPreset;
use evad_core::pruning::PruneStrategy;
use rayon::prelude::*;
use serde::Serialize;

use crate::{CliError, Result};

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsRow {
    pub rho: f64,
    pub resolution: usize,
    pub encoder_gflops: f64,
    pub decoder_gflops: f64,
    pub loc_gflops: f64,
    pub total_gflops: f64,
}

impl From<&FlopsReport> for FlopsRow {
    fn from(r: &FlopsReport) -> Self {
        FlopsRow {
            rho: r.config.keep_rate,
            resolution: r.config.height,
            encoder_gflops: r.encoder_gflops,
            decoder_gflops: r.decoder_gflops,
            loc_gflops: r.loc_gflops,
            total_gflops: r.total_gflops,
        }
    }
}

/// Cost reports for every `(rho, resolution)` pair, rho-major, in input order.
pub fn cmd_flops(
    preset: ModelPreset,
    rhos: &[f64],
    resolutions: &[usize],
    strategy: PruneStrategy,
) -> Result<Vec<FlopsReport>> {
    if rhos.is_empty() || resolutions.is_empty() {
        return Err(CliError::Config(
            "need at least one rho and one resolution".into(),
        ));
    }
    let pairs: Vec<(f64, usize)> = rhos
        .iter()
        .flat_map(|&r| resolutions.iter().map(move |&s| (r, s)))
        .collect();
    pairs
        .par_iter()
        .map(|&(rho, res)| {
            let mut cfg = preset.cost_config(res, rho);
            cfg.strategy = strategy;
            Ok(flops_total(&cfg)?)
        })
        .collect()
}

pub fn write_csv<W: Write>(reports: &[FlopsReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(FlopsRow::from(r))
            .map_err(|e| CliError::Config(format!("csv: {e}")))?;
    }
    w.flush()
        .map_err(|e| CliError::io(std::path::Path::new("<csv>"), e))?;
    Ok(())
}

pub fn write_json<W: Write>(reports: &[FlopsReport], mut out: W) -> Result<()> {
    let s = serde_json::to_string_pretty(reports).expect("reports serialize");
    writeln!(out, "{s}").map_err(|e| CliError::io(std::path::Path::new("<json>"), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_order() {
        let reps = cmd_flops(
            ModelPreset::Vitb,
            &[1.0, 0.7],
            &[224, 256],
            PruneStrategy::KeyframeGap,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&reps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "rho,resolution,encoder_gflops,decoder_gflops,loc_gflops,total_gflops"
        );
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1.0,224,"));
        assert!(lines[2].starts_with("1.0,256,"));
        assert!(lines[3].starts_with("0.7,224,"));
    }

    #[test]
    fn infeasible_rate_is_an_error() {
        let err = cmd_flops(
            ModelPreset::Vitb,
            &[0.5],
            &[224],
            PruneStrategy::KeyframeGap,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), crate::exit::CONFIG);
    }
}
