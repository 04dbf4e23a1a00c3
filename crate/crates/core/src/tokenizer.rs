//! Cube tokenization of video clips and the sparse token set that flows
//! through the encoder.
//!
//! A clip of `T x H x W x 3` values is cut into `2 x 16 x 16` cubes, each of
//! which becomes one token. Every token remembers its `(t, h, w)` cell on the
//! `T/2 x H/16 x W/16` grid so that pruned token sets can be restored to a
//! dense grid later. Token sets are always kept in row-major position order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvadError, Result};
use crate::numerics::{Linear, Matrix};
use crate::rng;
use crate::Scalar;

pub const CUBE_T: usize = 2;
pub const CUBE_HW: usize = 16;
pub const CHANNELS: usize = 3;
/// Flattened cube length: `2 * 16 * 16 * 3`.
pub const CUBE_LEN: usize = CUBE_T * CUBE_HW * CUBE_HW * CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        GridShape { t, h, w }
    }

    /// Token grid of a `frames x height x width` clip.
    pub fn for_clip(frames: usize, height: usize, width: usize) -> Result<Self> {
        check_clip_dims(frames, height, width)?;
        Ok(GridShape::new(
            frames / CUBE_T,
            height / CUBE_HW,
            width / CUBE_HW,
        ))
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens per temporal slice.
    pub fn slice_len(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, p: GridPos) -> bool {
        p.t < self.t && p.h < self.h && p.w < self.w
    }

    pub fn flat(&self, p: GridPos) -> usize {
        (p.t * self.h + p.h) * self.w + p.w
    }

    pub fn pos(&self, flat: usize) -> GridPos {
        GridPos {
            t: flat / (self.h * self.w),
            h: (flat / self.w) % self.h,
            w: flat % self.w,
        }
    }

    /// Middle tubelet, `floor(T'/2)`.
    pub fn default_keyframe(&self) -> usize {
        self.t / 2
    }

    pub fn iter(&self) -> impl Iterator<Item = GridPos> + '_ {
        (0..self.len()).map(|i| self.pos(i))
    }
}

/// A cell on the token grid. Derived ordering is row-major `(t, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPos {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridPos {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        GridPos { t, h, w }
    }
}

fn check_clip_dims(frames: usize, height: usize, width: usize) -> Result<()> {
    if frames == 0 || !frames.is_multiple_of(CUBE_T) {
        return Err(EvadError::Config(format!(
            "frame count {frames} must be a positive multiple of {CUBE_T}"
        )));
    }
    if height == 0
        || width == 0
        || !height.is_multiple_of(CUBE_HW)
        || !width.is_multiple_of(CUBE_HW)
    {
        return Err(EvadError::Config(format!(
            "frame size {height}x{width} must be a positive multiple of {CUBE_HW}"
        )));
    }
    Ok(())
}

/// Raw clip, laid out as `(frame, y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip<T> {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> VideoClip<T> {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let clip = VideoClip {
            frames,
            height,
            width,
            channels: CHANNELS,
            data,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            frames,
            height,
            width,
            vec![T::zero(); frames * height * width * CHANNELS],
        )
    }

    /// Seeded clip with values uniform in `[0, 1)`.
    pub fn synthetic(seed: u64, frames: usize, height: usize, width: usize) -> Result<Self> {
        check_clip_dims(frames, height, width)?;
        let mut r = rng::seeded(seed);
        let data = (0..frames * height * width * CHANNELS)
            .map(|_| T::lit(r.gen::<f64>()))
            .collect();
        Self::new(frames, height, width, data)
    }

    pub fn validate(&self) -> Result<()> {
        check_clip_dims(self.frames, self.height, self.width)?;
        if self.channels != CHANNELS {
            return Err(EvadError::Config(format!(
                "expected {CHANNELS} channels, got {}",
                self.channels
            )));
        }
        let want = self.frames * self.height * self.width * self.channels;
        if self.data.len() != want {
            return Err(EvadError::dim(
                "video_clip",
                format!("{} values, expected {want}", self.data.len()),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridShape {
        GridShape::new(
            self.frames / CUBE_T,
            self.height / CUBE_HW,
            self.width / CUBE_HW,
        )
    }

    #[inline]
    fn at(&self, f: usize, y: usize, x: usize, c: usize) -> T {
        self.data[((f * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Flattened cube at grid cell `p`, ordered `(dt, dy, dx, c)`.
    pub fn cube(&self, p: GridPos) -> Vec<T> {
        let mut out = Vec::with_capacity(CUBE_LEN);
        for dt in 0..CUBE_T {
            for dy in 0..CUBE_HW {
                for dx in 0..CUBE_HW {
                    for c in 0..CHANNELS {
                        out.push(self.at(
                            p.t * CUBE_T + dt,
                            p.h * CUBE_HW + dy,
                            p.w * CUBE_HW + dx,
                            c,
                        ));
                    }
                }
            }
        }
        out
    }

    /// Binary layout: four little-endian `u32` (T, H, W, C) followed by
    /// `T*H*W*C` little-endian `f64` values in `(t, y, x, c)` order.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in [self.frames, self.height, self.width, self.channels] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0usize; 4];
        let mut buf4 = [0u8; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut buf4)?;
            *h = u32::from_le_bytes(buf4) as usize;
        }
        let [frames, height, width, channels] = header;
        if channels != CHANNELS {
            return Err(EvadError::Config(format!(
                "clip file has {channels} channels, expected {CHANNELS}"
            )));
        }
        check_clip_dims(frames, height, width)?;
        let n = frames * height * width * channels;
        let mut bytes = Vec::with_capacity(n * 8);
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 8 {
            return Err(EvadError::dim(
                "read_clip",
                format!("{} payload bytes, expected {}", bytes.len(), n * 8),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        Self::new(frames, height, width, data)
    }
}

/// Sparse token collection: values plus grid positions, kept in canonical
/// row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    values: Matrix<T>,
    positions: Vec<GridPos>,
    grid: GridShape,
    keyframe_t: usize,
}

impl<T: Scalar> TokenSet<T> {
    /// Checks every invariant: one row per position, positions in bounds and
    /// strictly increasing, keyframe tubelet on the grid.
    pub fn new(
        values: Matrix<T>,
        positions: Vec<GridPos>,
        grid: GridShape,
        keyframe_t: usize,
    ) -> Result<Self> {
        if values.rows() != positions.len() {
            return Err(EvadError::dim(
                "token_set",
                format!("{} rows for {} positions", values.rows(), positions.len()),
            ));
        }
        if keyframe_t >= grid.t {
            return Err(EvadError::Config(format!(
                "keyframe tubelet {keyframe_t} outside a grid of {} tubelets",
                grid.t
            )));
        }
        if let Some(p) = positions.iter().find(|p| !grid.contains(**p)) {
            return Err(EvadError::Contract(format!(
                "position {p:?} outside grid {grid:?}"
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvadError::Contract(
                "positions must be unique and in row-major order".into(),
            ));
        }
        Ok(TokenSet {
            values,
            positions,
            grid,
            keyframe_t,
        })
    }

    /// Full grid of tokens with the given values (one row per cell).
    pub fn dense(values: Matrix<T>, grid: GridShape, keyframe_t: usize) -> Result<Self> {
        let positions = grid.iter().collect();
        Self::new(values, positions, grid, keyframe_t)
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn positions(&self) -> &[GridPos] {
        &self.positions
    }

    pub fn grid(&self) -> GridShape {
        self.grid
    }

    pub fn keyframe_t(&self) -> usize {
        self.keyframe_t
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Same positions, new values. Row count must match.
    pub fn with_values(&self, values: Matrix<T>) -> Result<Self> {
        if values.rows() != self.len() {
            return Err(EvadError::dim(
                "with_values",
                format!("{} rows for {} tokens", values.rows(), self.len()),
            ));
        }
        Ok(TokenSet {
            values,
            positions: self.positions.clone(),
            grid: self.grid,
            keyframe_t: self.keyframe_t,
        })
    }

    /// Keeps the tokens at `ids` (indices into this set). Ids are sorted so
    /// the result stays canonical.
    pub fn gather(&self, ids: &[usize]) -> Result<Self> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(EvadError::Contract(format!(
                "token index {bad} out of range for {} tokens",
                self.len()
            )));
        }
        Ok(TokenSet {
            values: self.values.select_rows(&ids),
            positions: ids.iter().map(|&i| self.positions[i]).collect(),
            grid: self.grid,
            keyframe_t: self.keyframe_t,
        })
    }

    /// Indices of the tokens sitting in the keyframe tubelet.
    pub fn keyframe_token_ids(&self) -> Vec<usize> {
        self.positions
            .iter()
            .enumerate()
            .filter(|(_, p)| p.t == self.keyframe_t)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_keyframe(&self, i: usize) -> bool {
        self.positions[i].t == self.keyframe_t
    }
}

/// Free-function form of [`TokenSet::keyframe_token_ids`].
pub fn keyframe_token_ids<T: Scalar>(ts: &TokenSet<T>) -> Vec<usize> {
    ts.keyframe_token_ids()
}

/// Linear projection of a flattened cube to a `d`-dimensional token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeEmbed<T> {
    pub proj: Linear<T>,
}

impl<T: Scalar> CubeEmbed<T> {
    pub fn new(proj: Linear<T>) -> Result<Self> {
        if proj.d_in() != CUBE_LEN {
            return Err(EvadError::dim(
                "cube_embed",
                format!("projection input {} != cube length {CUBE_LEN}", proj.d_in()),
            ));
        }
        Ok(CubeEmbed { proj })
    }

    pub fn random<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Self {
        CubeEmbed {
            proj: Linear::random(rng, CUBE_LEN, dim, scale),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out()
    }
}

/// Embeds every cube of `clip`. `keyframe_t` defaults to the middle tubelet.
pub fn cube_embed<T: Scalar>(
    clip: &VideoClip<T>,
    embed: &CubeEmbed<T>,
    keyframe_t: Option<usize>,
) -> Result<TokenSet<T>> {
    clip.validate()?;
    let grid = clip.grid();
    let mut cubes = Vec::with_capacity(grid.len() * CUBE_LEN);
    for p in grid.iter() {
        cubes.extend(clip.cube(p));
    }
    let cubes = Matrix::from_vec(grid.len(), CUBE_LEN, cubes)?;
    let values = embed.proj.forward(&cubes)?;
    TokenSet::dense(
        values,
        grid,
        keyframe_t.unwrap_or_else(|| grid.default_keyframe()),
    )
}

/// Additive positional encoding, one `d`-vector per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable<T> {
    grid: GridShape,
    table: Matrix<T>,
}

impl<T: Scalar> PositionalTable<T> {
    pub fn zeros(grid: GridShape, dim: usize) -> Self {
        PositionalTable {
            grid,
            table: Matrix::zeros(grid.len(), dim),
        }
    }

    /// Fixed sinusoidal encoding factorized over the three axes. Channel `j`
    /// encodes axis `j % 3`; within an axis, channels alternate sin/cos over
    /// geometrically spaced frequencies starting at 1.
    pub fn sinusoidal(grid: GridShape, dim: usize) -> Self {
        let per_axis = dim.div_ceil(3).max(1) as f64;
        let mut table = Matrix::zeros(grid.len(), dim);
        for (row, p) in grid.iter().enumerate() {
            let coords = [p.t, p.h, p.w];
            for j in 0..dim {
                let k = j / 3;
                let freq = 10000f64.powf(-2.0 * (k / 2) as f64 / per_axis);
                let arg = coords[j % 3] as f64 * freq;
                let v = if k % 2 == 0 { arg.sin() } else { arg.cos() };
                table.set(row, j, T::lit(v));
            }
        }
        PositionalTable { grid, table }
    }

    pub fn grid(&self) -> GridShape {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn encoding(&self, p: GridPos) -> &[T] {
        self.table.row(self.grid.flat(p))
    }
}

pub fn add_positional<T: Scalar>(
    ts: &TokenSet<T>,
    table: &PositionalTable<T>,
) -> Result<TokenSet<T>> {
    if table.grid() != ts.grid() || table.dim() != ts.dim() {
        return Err(EvadError::dim(
            "add_positional",
            format!(
                "table {:?}/{} vs tokens {:?}/{}",
                table.grid(),
                table.dim(),
                ts.grid(),
                ts.dim()
            ),
        ));
    }
    let mut values = ts.values().clone();
    for (i, &p) in ts.positions().iter().enumerate() {
        for (v, &e) in values.row_mut(i).iter_mut().zip(table.encoding(p)) {
            *v = *v + e;
        }
    }
    ts.with_values(values)
}
