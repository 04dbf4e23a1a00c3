use evad_core::oracle::{run_suite, SuiteReport};
use evad_core::pruning::TieBreak;
use log::warn;

use crate::{CliError, Result};

/// Compares the optimized pipeline against the loop-based reference on
/// seeds `0..seeds`. `corrupt_ties` reverses tie-breaking in the optimized
/// path, which the suite must catch.
pub fn cmd_oracle(seeds: u64, corrupt_ties: bool) -> Result<SuiteReport> {
    if seeds == 0 {
        warn!("0 seeds requested: nothing is checked");
    }
    let tie = if corrupt_ties {
        TieBreak::HigherIndexFirst
    } else {
        TieBreak::LowerIndexFirst
    };
    let report = run_suite(seeds, tie);
    match &report.failure {
        Some(f) => Err(CliError::Oracle(f.to_string())),
        None => Ok(report),
    }
}
