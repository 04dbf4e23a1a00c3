//! Action classification branch: restore sparse tokens to a dense grid,
//! pool actor features with an extended 3D RoIAlign, refine them against the
//! surviving context tokens and classify.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvadError, Result};
use crate::numerics::{sigmoid, LayerParams, Linear, Matrix};
use crate::rng;
use crate::tokenizer::{GridPos, GridShape, TokenSet};
use crate::Scalar;

/// Dense `(T', H', W')` grid of `d`-vectors with an occupancy mask.
/// Unoccupied cells hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    shape: GridShape,
    dim: usize,
    values: Vec<T>,
    occupied: Vec<bool>,
}

impl<T: Scalar> FeatureGrid<T> {
    /// Fully occupied grid holding `c` in every channel of every cell.
    pub fn constant(shape: GridShape, dim: usize, c: T) -> Self {
        FeatureGrid {
            shape,
            dim,
            values: vec![c; shape.len() * dim],
            occupied: vec![true; shape.len()],
        }
    }

    /// Fully occupied grid from one row per cell, row-major.
    pub fn from_dense(shape: GridShape, values: &Matrix<T>) -> Result<Self> {
        if values.rows() != shape.len() {
            return Err(EvadError::dim(
                "feature_grid",
                format!("{} rows for {} cells", values.rows(), shape.len()),
            ));
        }
        Ok(FeatureGrid {
            shape,
            dim: values.cols(),
            values: values.data().to_vec(),
            occupied: vec![true; shape.len()],
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, p: GridPos) -> &[T] {
        let i = self.shape.flat(p);
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_occupied(&self, p: GridPos) -> bool {
        self.occupied[self.shape.flat(p)]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Reads the cells at `positions` back into a matrix.
    pub fn gather(&self, positions: &[GridPos]) -> Matrix<T> {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            data.extend_from_slice(self.cell(p));
        }
        Matrix::from_vec(positions.len(), self.dim, data).expect("gather shape")
    }

    /// `a * self + other`, cellwise; occupancy is the union.
    pub fn axpy(&self, a: T, other: &Self) -> Result<Self> {
        if self.shape != other.shape || self.dim != other.dim {
            return Err(EvadError::dim("axpy", "grid shapes differ"));
        }
        Ok(FeatureGrid {
            shape: self.shape,
            dim: self.dim,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&x, &y)| a * x + y)
                .collect(),
            occupied: self
                .occupied
                .iter()
                .zip(&other.occupied)
                .map(|(&x, &y)| x || y)
                .collect(),
        })
    }
}

/// Writes each token into its grid cell; everything else stays zero.
pub fn scatter_to_grid<T: Scalar>(ts: &TokenSet<T>) -> Result<FeatureGrid<T>> {
    let shape = ts.grid();
    let dim = ts.dim();
    let mut values = vec![T::zero(); shape.len() * dim];
    let mut occupied = vec![false; shape.len()];
    for (row, &p) in ts.positions().iter().enumerate() {
        if !shape.contains(p) {
            return Err(EvadError::Contract(format!(
                "position {p:?} outside grid {shape:?}"
            )));
        }
        let i = shape.flat(p);
        if std::mem::replace(&mut occupied[i], true) {
            return Err(EvadError::Contract(format!("duplicate position {p:?}")));
        }
        values[i * dim..(i + 1) * dim].copy_from_slice(ts.values().row(row));
    }
    Ok(FeatureGrid {
        shape,
        dim,
        values,
        occupied,
    })
}

/// Normalized box `(x1, y1, x2, y2)` in `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for NormBox {
    fn from(v: [f64; 4]) -> Self {
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl NormBox {
    pub const FULL: NormBox = NormBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        NormBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn clamped(&self) -> Self {
        NormBox {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        let c = self.clamped();
        if !finite || !(c.x1 < c.x2 && c.y1 < c.y2) {
            return Err(EvadError::Contract(format!(
                "degenerate box {:?}",
                [self.x1, self.y1, self.x2, self.y2]
            )));
        }
        Ok(())
    }
}

/// Scales width by `1 + ex` and height by `1 + ey` about the center, without
/// clamping. Area grows by exactly `(1 + ex)(1 + ey)`.
pub fn extend_box_unclamped(b: NormBox, ex: f64, ey: f64) -> Result<NormBox> {
    b.validate()?;
    if !(ex >= 0.0 && ey >= 0.0) {
        return Err(EvadError::Config(format!(
            "extension ratios ({ex}, {ey}) must be nonnegative"
        )));
    }
    // half of the growth on each side keeps the center fixed
    let gx = 0.5 * b.width() * ex;
    let gy = 0.5 * b.height() * ey;
    Ok(NormBox::new(b.x1 - gx, b.y1 - gy, b.x2 + gx, b.y2 + gy))
}

/// [`extend_box_unclamped`] followed by clamping to the unit square.
pub fn extend_box(b: NormBox, ex: f64, ey: f64) -> Result<NormBox> {
    Ok(extend_box_unclamped(b, ex, ey)?.clamped())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub keyframe_box: NormBox,
    pub extend_x: f64,
    pub extend_y: f64,
    /// `S`, spatial bins per axis.
    pub bins: usize,
    /// `s`, bilinear samples per bin per axis.
    pub samples: usize,
}

impl RoiSpec {
    pub const DEFAULT_BINS: usize = 7;
    pub const DEFAULT_SAMPLES: usize = 2;

    pub fn new(keyframe_box: NormBox) -> Self {
        RoiSpec {
            keyframe_box,
            extend_x: 0.0,
            extend_y: 0.0,
            bins: Self::DEFAULT_BINS,
            samples: Self::DEFAULT_SAMPLES,
        }
    }

    pub fn with_extension(mut self, ex: f64, ey: f64) -> Self {
        self.extend_x = ex;
        self.extend_y = ey;
        self
    }

    pub fn with_sampling(mut self, bins: usize, samples: usize) -> Self {
        self.bins = bins;
        self.samples = samples;
        self
    }

    pub fn pooling_box(&self) -> Result<NormBox> {
        if self.bins == 0 || self.samples == 0 {
            return Err(EvadError::Config(
                "RoIAlign needs at least one bin and one sample".into(),
            ));
        }
        let b = extend_box(self.keyframe_box, self.extend_x, self.extend_y)?;
        b.validate()?;
        Ok(b)
    }
}

/// Bilinear sample of one temporal slice at continuous cell coordinates,
/// where cell `(i, j)` is centered at `(i + 0.5, j + 0.5)`. Out-of-range
/// samples beyond one cell of the border read as zero; samples inside are
/// clamped to the edge cells.
fn bilinear<T: Scalar>(grid: &FeatureGrid<T>, t: usize, y: f64, x: f64, acc: &mut [T], weight: T) {
    let (h, w) = (grid.shape.h, grid.shape.w);
    let mut y = y - 0.5;
    let mut x = x - 0.5;
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let (y1, x1);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let corners = [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x1, (1.0 - ly) * lx),
        (y1, x0, ly * (1.0 - lx)),
        (y1, x1, ly * lx),
    ];
    for (cy, cx, cw) in corners {
        if cw == 0.0 {
            continue;
        }
        let cw = T::lit(cw) * weight;
        for (a, &v) in acc.iter_mut().zip(grid.cell(GridPos::new(t, cy, cx))) {
            *a = *a + cw * v;
        }
    }
}

/// 3D RoIAlign: the pooling box is applied to every temporal slice, each
/// slice is divided into `S x S` bins with `s x s` bilinear samples each, and
/// everything is averaged into one `d`-vector.
pub fn roi_align_3d<T: Scalar>(grid: &FeatureGrid<T>, roi: &RoiSpec) -> Result<Vec<T>> {
    let b = roi.pooling_box()?;
    let shape = grid.shape;
    if shape.is_empty() {
        return Err(EvadError::Contract("RoIAlign on an empty grid".into()));
    }
    let (h, w) = (shape.h as f64, shape.w as f64);
    let (y_start, x_start) = (b.y1 * h, b.x1 * w);
    let bin_h = b.height() * h / roi.bins as f64;
    let bin_w = b.width() * w / roi.bins as f64;
    let per_axis = roi.bins * roi.samples;
    let count = shape.t * per_axis * per_axis;
    let weight = T::one() / T::lit(count as f64);
    let mut acc = vec![T::zero(); grid.dim];
    for t in 0..shape.t {
        for by in 0..roi.bins {
            for sy in 0..roi.samples {
                let y = y_start + bin_h * (by as f64 + (sy as f64 + 0.5) / roi.samples as f64);
                for bx in 0..roi.bins {
                    for sx in 0..roi.samples {
                        let x =
                            x_start + bin_w * (bx as f64 + (sx as f64 + 0.5) / roi.samples as f64);
                        bilinear(grid, t, y, x, &mut acc, weight);
                    }
                }
            }
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Number of actor queries the localization branch would emit.
    pub queries: usize,
}

impl DecoderConfig {
    pub fn vitb() -> Self {
        DecoderConfig {
            dim: 384,
            depth: 6,
            heads: 6,
            queries: 100,
        }
    }

    pub fn vitl() -> Self {
        DecoderConfig {
            dim: 512,
            depth: 12,
            heads: 8,
            queries: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(EvadError::Config(format!(
                "decoder dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Shared `d -> d'` input projection plus the decoder layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights<T> {
    pub input_proj: Linear<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> DecoderWeights<T> {
    pub fn random(seed: u64, encoder_dim: usize, cfg: &DecoderConfig, scale: f64) -> Self {
        let mut r = rng::seeded(seed);
        DecoderWeights {
            input_proj: Linear::random(&mut r, encoder_dim, cfg.dim, scale),
            layers: (0..cfg.depth)
                .map(|_| LayerParams::random(&mut r, cfg.dim, cfg.heads, scale))
                .collect(),
        }
    }
}

/// Refines `n` actor features against `M` context tokens. Both are projected
/// to the decoder width by the same map, concatenated actors-first, run
/// through the pre-norm layers, and the first `n` rows are returned.
pub fn run_decoder<T: Scalar>(
    roi_feats: &Matrix<T>,
    context: &TokenSet<T>,
    cfg: &DecoderConfig,
    weights: &DecoderWeights<T>,
) -> Result<Matrix<T>> {
    cfg.validate()?;
    let n = roi_feats.rows();
    if n == 0 {
        return Err(EvadError::Contract(
            "decoder needs at least one actor feature".into(),
        ));
    }
    let d = weights.input_proj.d_in();
    if roi_feats.cols() != d || (!context.is_empty() && context.dim() != d) {
        return Err(EvadError::Config(format!(
            "decoder expects {d}-dim inputs, got actors {} and context {}",
            roi_feats.cols(),
            context.dim()
        )));
    }
    if weights.input_proj.d_out() != cfg.dim || weights.layers.len() != cfg.depth {
        return Err(EvadError::Config(format!(
            "decoder weights do not match {cfg:?}"
        )));
    }
    let seq = if context.is_empty() {
        roi_feats.clone()
    } else {
        roi_feats.vstack(context.values())?
    };
    let mut x = weights.input_proj.forward(&seq)?;
    for layer in &weights.layers {
        x = layer.forward(&x)?;
    }
    Ok(x.select_rows(&(0..n).collect::<Vec<_>>()))
}

/// Affine classification layer with sigmoid outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn random<R: Rng>(rng: &mut R, dim: usize, classes: usize, scale: f64) -> Self {
        ClassifierHead {
            linear: Linear::random(rng, dim, classes, scale),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.d_out()
    }
}

pub fn classify<T: Scalar>(refined: &Matrix<T>, head: &ClassifierHead<T>) -> Result<Matrix<T>> {
    Ok(head.linear.forward(refined)?.map(sigmoid))
}
