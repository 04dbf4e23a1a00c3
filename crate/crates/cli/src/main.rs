use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evad_cli::flops::{write_csv, write_json};
use evad_cli::{cmd_bench, cmd_flops, cmd_oracle, cmd_run, exit, parse_list, CliError, RunConfig};
use evad_core::presets::ModelPreset;
use evad_core::pruning::PruneStrategy;

#[derive(Parser)]
#[command(
    name = "evad",
    version,
    about = "Keyframe-centric token pruning for video action detection"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<ModelPreset>,
    /// Keep rate per pruning stage.
    #[arg(long)]
    rho: Option<f64>,
    /// Keyframe attention weight.
    #[arg(long)]
    wkf: Option<f64>,
    /// keyframe_gap, unified_gap or random.
    #[arg(long)]
    strategy: Option<PruneStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Square input side in pixels.
    #[arg(long)]
    resolution: Option<usize>,
    /// Comma-separated 1-based layers, e.g. 4,7,10.
    #[arg(long)]
    prune_layers: Option<String>,
    /// JSON array of [x1, y1, x2, y2] normalized keyframe boxes.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Raw clip file; synthetic input otherwise.
    #[arg(long)]
    clip: Option<PathBuf>,
    /// Encoder weight blob; seeded weights otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.preset {
            cfg.preset = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.wkf {
            cfg.wkf = v;
        }
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.frames {
            cfg.frames = Some(v);
        }
        if let Some(v) = self.resolution {
            cfg.resolution = Some(v);
        }
        if let Some(v) = &self.prune_layers {
            cfg.prune_layers = Some(parse_list(v)?);
        }
        if let Some(v) = &self.boxes {
            cfg.boxes = Some(v.clone());
        }
        if let Some(v) = &self.clip {
            cfg.clip = Some(v.clone());
        }
        if let Some(v) = &self.weights {
            cfg.weights = Some(v.clone());
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the pipeline and write trace, masks and scores.
    Run {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic GFLOPs over keep rates and resolutions.
    Flops {
        #[arg(long, default_value = "vitb")]
        preset: ModelPreset,
        #[arg(long, default_value = "1.0,0.9,0.8,0.7,0.6")]
        rho: String,
        #[arg(long, default_value = "224")]
        resolution: String,
        #[arg(long, default_value = "keyframe_gap")]
        strategy: PruneStrategy,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Output file; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-clock the post-embedding forward pass.
    Bench {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated keep rates; overrides --rho.
        #[arg(long = "rhos", default_value = "1.0,0.7,0.5")]
        rhos: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Check the pipeline against the reference implementation.
    Oracle {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, hide = true)]
        corrupt_tie_break: bool,
    },
}

fn open_out(path: Option<&PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            CliError::Io {
                path: p.display().to_string(),
                source: e,
            }
        })?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Run { args, out } => {
            let mut cfg = args.resolve()?;
            if let Some(o) = out {
                cfg.out = o;
            }
            let s = cmd_run(&cfg)?;
            println!(
                "seed {}: tokens {} -> {:?} (retention {:.4}), wrote {} files to {}",
                cfg.seed,
                s.initial_tokens,
                s.token_counts,
                s.retention(),
                s.files.len(),
                s.out_dir.display()
            );
        }
        Cmd::Flops {
            preset,
            rho,
            resolution,
            strategy,
            format,
            out,
        } => {
            let reports = cmd_flops(
                preset,
                &parse_list(&rho)?,
                &parse_list(&resolution)?,
                strategy,
            )?;
            let w = open_out(out.as_ref())?;
            match format {
                Format::Csv => write_csv(&reports, w)?,
                Format::Json => write_json(&reports, w)?,
            }
        }
        Cmd::Bench {
            args,
            rhos,
            repeats,
        } => {
            let cfg = args.resolve()?;
            let rep = cmd_bench(&cfg, &parse_list(&rhos)?, repeats)?;
            if rep.low_confidence {
                println!("low confidence: only {repeats} repeat(s)");
            }
            println!("rho,median_ms,min_ms,max_ms,tokens");
            for r in &rep.rows {
                let counts: Vec<String> = std::iter::once(r.initial_tokens)
                    .chain(r.token_counts.iter().copied())
                    .map(|c| c.to_string())
                    .collect();
                println!(
                    "{},{:.4},{:.4},{:.4},{}",
                    r.rho,
                    r.median_ms,
                    r.min_ms,
                    r.max_ms,
                    counts.join(">")
                );
            }
        }
        Cmd::Oracle {
            seeds,
            corrupt_tie_break,
        } => {
            let rep = cmd_oracle(seeds, corrupt_tie_break)?;
            println!(
                "oracle: {} seeds passed, max deviation {:e}",
                rep.seeds, rep.max_deviation
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
