use std::fs;
use std::path::{Path, PathBuf};

use evad_core::encoder::{EncoderConfig, EncoderOutput, EncoderWeights};
use evad_core::presets::ExecShape;
use evad_core::pruning::{PruneConfig, TieBreak};
use evad_core::refine::{
    classify, extend_box, roi_align_3d, run_decoder, scatter_to_grid, ClassifierHead,
    DecoderConfig, DecoderWeights, NormBox, RoiSpec,
};
use evad_core::rng::{derive_seed, seeded, INIT_SCALE};
use evad_core::tokenizer::{
    add_positional, cube_embed, GridPos, GridShape, PositionalTable, TokenSet, VideoClip,
};
use evad_core::Matrix;
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::masks::masks_from_trace;
use crate::{CliError, Result};

const STREAM_CLIP: u64 = 0;
const STREAM_ENCODER: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_HEAD: u64 = 3;

/// Box used when no box file is given.
pub const DEFAULT_BOX: NormBox = NormBox {
    x1: 0.25,
    y1: 0.25,
    x2: 0.75,
    y2: 0.75,
};

/// Every weight and setting needed to go from a clip to action scores.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub shape: ExecShape,
    pub grid: GridShape,
    pub keyframe_t: usize,
    pub encoder: EncoderConfig,
    pub weights: EncoderWeights<f64>,
    pub positional: PositionalTable<f64>,
    pub decoder: DecoderConfig,
    pub decoder_weights: DecoderWeights<f64>,
    pub head: ClassifierHead<f64>,
    pub extend: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub encoded: EncoderOutput<f64>,
    pub extended: Vec<NormBox>,
    /// `boxes x classes`, sigmoid outputs.
    pub scores: Matrix,
}

impl Pipeline {
    /// Builds and validates everything, including the token schedule, before
    /// any heavy computation happens.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let mut shape = cfg.preset.exec_shape();
        shape.frames = cfg.frames();
        shape.resolution = cfg.resolution();
        shape.prune_layers = cfg.prune_layers();
        let grid = GridShape::for_clip(shape.frames, shape.resolution, shape.resolution)?;
        let keyframe_t = cfg.keyframe_t.unwrap_or_else(|| grid.default_keyframe());
        if keyframe_t >= grid.t {
            return Err(CliError::Config(format!(
                "keyframe tubelet {keyframe_t} outside 0..{}",
                grid.t
            )));
        }

        let prune = PruneConfig {
            keep_rate: cfg.rho,
            keyframe_weight: cfg.wkf,
            strategy: cfg.strategy,
            seed: cfg.seed,
            tie_break: TieBreak::LowerIndexFirst,
        };
        let encoder = EncoderConfig::new(shape.depth, shape.dim, shape.heads, prune)?
            .with_prune_layers(shape.prune_layers.clone())?;
        encoder.token_schedule(grid.len(), grid.slice_len())?;

        let [ex, ey] = cfg.extend;
        extend_box(DEFAULT_BOX, ex, ey)?;

        let weights = match &cfg.weights {
            Some(path) => {
                let w = EncoderWeights::read_blob(path)?;
                w.check_against(&encoder)?;
                w
            }
            None => EncoderWeights::random(
                derive_seed(cfg.seed, STREAM_ENCODER),
                shape.depth,
                shape.dim,
                shape.heads,
                INIT_SCALE,
            ),
        };
        let decoder = shape.decoder;
        decoder.validate()?;
        let decoder_weights = DecoderWeights::random(
            derive_seed(cfg.seed, STREAM_DECODER),
            shape.dim,
            &decoder,
            INIT_SCALE,
        );
        let head = ClassifierHead::random(
            &mut seeded(derive_seed(cfg.seed, STREAM_HEAD)),
            decoder.dim,
            shape.classes,
            INIT_SCALE,
        );
        Ok(Pipeline {
            positional: PositionalTable::sinusoidal(grid, shape.dim),
            shape,
            grid,
            keyframe_t,
            encoder,
            weights,
            decoder,
            decoder_weights,
            head,
            extend: (ex, ey),
        })
    }

    pub fn load_clip(&self, cfg: &RunConfig) -> Result<VideoClip<f64>> {
        let clip = match &cfg.clip {
            Some(path) => VideoClip::read_from(path)?,
            None => VideoClip::synthetic(
                derive_seed(cfg.seed, STREAM_CLIP),
                self.shape.frames,
                self.shape.resolution,
                self.shape.resolution,
            )?,
        };
        if clip.grid() != self.grid {
            return Err(CliError::Config(format!(
                "clip grid {:?} does not match configured grid {:?}",
                clip.grid(),
                self.grid
            )));
        }
        Ok(clip)
    }

    /// Cube embedding plus positional encoding.
    pub fn embed(&self, clip: &VideoClip<f64>) -> Result<TokenSet<f64>> {
        let ts = cube_embed(clip, &self.weights.embed, Some(self.keyframe_t))?;
        Ok(add_positional(&ts, &self.positional)?)
    }

    /// Encoder, refine branch and classifier on embedded tokens.
    pub fn forward(&self, tokens: &TokenSet<f64>, boxes: &[NormBox]) -> Result<Forward> {
        let encoded = evad_core::encoder::run_encoder(tokens, &self.encoder, &self.weights)?;
        let grid = scatter_to_grid(&encoded.tokens)?;
        let (ex, ey) = self.extend;
        let mut rows = Vec::with_capacity(boxes.len() * self.shape.dim);
        let mut extended = Vec::with_capacity(boxes.len());
        for b in boxes {
            let roi = RoiSpec::new(*b).with_extension(ex, ey);
            extended.push(roi.pooling_box()?);
            rows.extend(roi_align_3d(&grid, &roi)?);
        }
        let roi_feats = Matrix::from_vec(boxes.len(), self.shape.dim, rows)?;
        let refined = run_decoder(
            &roi_feats,
            &encoded.tokens,
            &self.decoder,
            &self.decoder_weights,
        )?;
        let scores = classify(&refined, &self.head)?;
        Ok(Forward {
            encoded,
            extended,
            scores,
        })
    }
}

pub fn load_boxes(path: Option<&Path>) -> Result<Vec<NormBox>> {
    let boxes: Vec<NormBox> = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => vec![DEFAULT_BOX],
    };
    if boxes.is_empty() {
        return Err(CliError::Config("box list is empty".into()));
    }
    for b in &boxes {
        b.validate()?;
    }
    Ok(boxes)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreEntry {
    pub id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTrace {
    pub stage: usize,
    pub layer: usize,
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub kept_ids: Vec<usize>,
    pub kept_positions: Vec<GridPos>,
    pub scores: Vec<ScoreEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub seed: u64,
    /// Run config minus the output directory, so traces from different
    /// output locations compare equal.
    pub config: serde_json::Value,
    pub grid: [usize; 3],
    pub keyframe_t: usize,
    pub keyframe_tokens: usize,
    pub initial_tokens: usize,
    pub final_tokens: usize,
    pub retention: f64,
    pub stages: Vec<StageTrace>,
}

#[derive(Debug, Clone, Serialize)]
struct MaskList {
    layer: usize,
    stage: usize,
    positions: Vec<GridPos>,
}

#[derive(Debug, Clone, Serialize)]
struct ScoresFile {
    classes: usize,
    boxes: Vec<NormBox>,
    extended_boxes: Vec<NormBox>,
    scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub initial_tokens: usize,
    pub token_counts: Vec<usize>,
    pub final_tokens: usize,
    pub files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn retention(&self) -> f64 {
        self.final_tokens as f64 / self.initial_tokens as f64
    }
}

fn write(path: PathBuf, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    files.push(path);
    Ok(())
}

fn config_without_out(cfg: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("serializable");
    if let Some(m) = v.as_object_mut() {
        m.remove("out");
    }
    v
}

fn to_json<S: Serialize>(v: &S) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Runs the full pipeline and writes `trace.json`, `scores.json`,
/// `masks.json` and one PGM per stage and temporal slice under `cfg.out`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    info!(
        "run seed={} preset={} rho={} wkf={}",
        cfg.seed, cfg.preset, cfg.rho, cfg.wkf
    );
    let pipe = Pipeline::build(cfg)?;
    let boxes = load_boxes(cfg.boxes.as_deref())?;
    let clip = pipe.load_clip(cfg)?;
    let tokens = pipe.embed(&clip)?;
    let fwd = pipe.forward(&tokens, &boxes)?;

    let out = &cfg.out;
    let mask_dir = out.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|e| CliError::io(&mask_dir, e))?;
    let mut files = Vec::new();

    let trace = &fwd.encoded.prune_trace;
    let stages: Vec<StageTrace> = trace
        .iter()
        .enumerate()
        .map(|(k, r)| StageTrace {
            stage: k + 1,
            layer: r.layer,
            tokens_before: r.tokens_before,
            tokens_after: r.tokens_after(),
            kept_ids: r.kept.clone(),
            kept_positions: r.kept_positions.clone(),
            scores: r
                .scores
                .ids
                .iter()
                .zip(&r.scores.scores)
                .map(|(&id, &score)| ScoreEntry { id, score })
                .collect(),
        })
        .collect();
    let initial = pipe.grid.len();
    let final_tokens = fwd.encoded.tokens.len();
    let doc = Trace {
        seed: cfg.seed,
        config: config_without_out(cfg),
        grid: [pipe.grid.t, pipe.grid.h, pipe.grid.w],
        keyframe_t: pipe.keyframe_t,
        keyframe_tokens: pipe.grid.slice_len(),
        initial_tokens: initial,
        final_tokens,
        retention: final_tokens as f64 / initial as f64,
        stages,
    };
    write(out.join("trace.json"), &to_json(&doc), &mut files)?;

    let lists: Vec<MaskList> = trace
        .iter()
        .enumerate()
        .map(|(k, r)| MaskList {
            layer: r.layer,
            stage: k + 1,
            positions: r.kept_positions.clone(),
        })
        .collect();
    write(out.join("masks.json"), &to_json(&lists), &mut files)?;
    for m in masks_from_trace(pipe.grid, trace) {
        write(mask_dir.join(m.file_name()), &m.to_pgm(), &mut files)?;
    }

    let scores = ScoresFile {
        classes: pipe.head.classes(),
        boxes,
        extended_boxes: fwd.extended,
        scores: fwd.scores.to_rows(),
    };
    write(out.join("scores.json"), &to_json(&scores), &mut files)?;

    let token_counts: Vec<usize> = trace.iter().map(|r| r.tokens_after()).collect();
    info!(
        "tokens {} -> {:?}, {} files under {}",
        initial,
        token_counts,
        files.len(),
        out.display()
    );
    Ok(RunSummary {
        out_dir: out.clone(),
        initial_tokens: initial,
        token_counts,
        final_tokens,
        files,
    })
}
