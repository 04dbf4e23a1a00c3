//! Token-retention masks: one binary `H' x W'` image per temporal slice per
//! pruning stage, written as ASCII PGM.

use std::collections::HashSet;
use std::fmt::Write as _;

use evad_core::encoder::PruneRecord;
use evad_core::tokenizer::{GridPos, GridShape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    /// Pruning stage, counted from 1.
    pub stage: usize,
    pub layer: usize,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, 1 where the token survived.
    pub pixels: Vec<u8>,
}

impl MaskImage {
    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.pixels[h * self.width + w]
    }

    pub fn all_ones(&self) -> bool {
        self.pixels.iter().all(|&p| p == 1)
    }

    /// Plain `P2` PGM with maxval 1.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n1\n", self.width, self.height);
        for row in self.pixels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(s, "{}", line.join(" ")).expect("write to string");
        }
        s
    }

    pub fn file_name(&self) -> String {
        format!(
            "stage{}_layer{:02}_t{:02}.pgm",
            self.stage, self.layer, self.t
        )
    }
}

pub fn masks_from_trace<T>(grid: GridShape, trace: &[PruneRecord<T>]) -> Vec<MaskImage> {
    let mut out = Vec::with_capacity(trace.len() * grid.t);
    for (k, rec) in trace.iter().enumerate() {
        let kept: HashSet<GridPos> = rec.kept_positions.iter().copied().collect();
        for t in 0..grid.t {
            let mut pixels = Vec::with_capacity(grid.slice_len());
            for h in 0..grid.h {
                for w in 0..grid.w {
                    pixels.push(u8::from(kept.contains(&GridPos::new(t, h, w))));
                }
            }
            out.push(MaskImage {
                stage: k + 1,
                layer: rec.layer,
                t,
                height: grid.h,
                width: grid.w,
                pixels,
            });
        }
    }
    out
}
