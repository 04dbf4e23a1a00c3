//! Command implementations behind the `evad` binary.
//!
//! Each `cmd_*` function is a plain library call so that tests can drive
//! the same code paths the binary does.

pub mod bench;
pub mod config;
pub mod flops;
pub mod masks;
pub mod oracle;
pub mod run;

use evad_core::EvadError;
use thiserror::Error;

pub use bench::{cmd_bench, BenchReport, BenchRow};
pub use config::RunConfig;
pub use flops::{cmd_flops, FlopsRow};
pub use oracle::cmd_oracle;
pub use run::{cmd_run, RunSummary};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const ORACLE: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] EvadError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("oracle failure: {0}")]
    Oracle(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(EvadError::Io(_)) | CliError::Io { .. } => exit::IO,
            CliError::Core(_) | CliError::Config(_) => exit::CONFIG,
            CliError::Oracle(_) => exit::ORACLE,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Parses a comma-separated list such as `1.0,0.9,0.8`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| CliError::Config(format!("cannot parse {p:?} in list {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists() {
        assert_eq!(
            parse_list::<f64>("1.0, 0.7,0.5").unwrap(),
            vec![1.0, 0.7, 0.5]
        );
        assert_eq!(parse_list::<usize>("224").unwrap(), vec![224]);
        assert!(parse_list::<usize>("22x").is_err());
    }

    #[test]
    fn exit_codes() {
        let feas = CliError::from(EvadError::Feasibility {
            n: 4,
            n_key: 2,
            rho: 0.5,
            kept: 2,
        });
        assert_eq!(feas.exit_code(), exit::CONFIG);
        let io = CliError::io(
            std::path::Path::new("x"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        );
        assert_eq!(io.exit_code(), exit::IO);
        assert_eq!(CliError::Oracle("seed 3".into()).exit_code(), exit::ORACLE);
    }
}
