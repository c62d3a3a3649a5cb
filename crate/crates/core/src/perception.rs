//! Cell-level object detection: cut the image into 10×10 patches, score
//! each against the sprite templates with normalized cross-correlation, and
//! lay the scores out as per-predicate maps.

use std::sync::OnceLock;

use thiserror::Error;

use crate::gridworld::bitmaps::{self, Mask, AGENT_MASK};
use crate::gridworld::{Cell, Observation, ObjectType, CELL, GRID, IMAGE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("expected a {expected}-value image, got {got}")]
    ImageSize { expected: usize, got: usize },
    #[error("cannot upsample {from_rows}x{from_cols} to {to_rows}x{to_cols}: sizes must divide")]
    NotDivisible {
        from_rows: usize,
        from_cols: usize,
        to_rows: usize,
        to_cols: usize,
    },
    #[error("grid shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, PerceptionError>;

/// Number of type predicates with a detector.
pub const PREDICATES: usize = 4;
/// Detector channel names in map order.
pub const PREDICATE_NAMES: [&str; PREDICATES] = ["circle", "square", "cross", "agent"];
pub const AGENT_CHANNEL: usize = 3;
/// Below this best score a cell counts as empty.
pub const EMPTY_THRESHOLD: f64 = 0.5;

const PATCH_PIXELS: usize = CELL * CELL;
/// BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const FLAT_SIGMA: f64 = 1e-6;

/// One 10×10 RGB cell of the image, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    data: [f64; PATCH_PIXELS * 3],
}

impl Patch {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * CELL + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Dense rows × cols × channels grid of reals, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ChannelGrid {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
        }
    }

    pub fn from_data(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(PerceptionError::Shape(format!(
                "{rows}x{cols}x{channels} needs {} values, got {}",
                rows * cols * channels,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.cols + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.cols + col) * self.channels + ch] = v;
    }

    /// All channel values of one cell.
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn channel_sum(&self, ch: usize) -> f64 {
        self.data.iter().skip(ch).step_by(self.channels).sum()
    }
}

/// What a cell holds according to the detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Detected {
    Empty,
    Object(ObjectType),
    Agent,
}

pub fn extract_patches(obs: &Observation) -> Vec<Patch> {
    extract_patches_raw(obs.data()).expect("observations always have the image size")
}

/// Like [`extract_patches`] for a raw 50×50×3 buffer.
pub fn extract_patches_raw(data: &[f64]) -> Result<Vec<Patch>> {
    if data.len() != Observation::LEN {
        return Err(PerceptionError::ImageSize {
            expected: Observation::LEN,
            got: data.len(),
        });
    }
    let mut out = Vec::with_capacity(GRID * GRID);
    for gr in 0..GRID {
        for gc in 0..GRID {
            let mut p = [0.0; PATCH_PIXELS * 3];
            for r in 0..CELL {
                let src = ((gr * CELL + r) * IMAGE + gc * CELL) * 3;
                p[r * CELL * 3..(r + 1) * CELL * 3].copy_from_slice(&data[src..src + CELL * 3]);
            }
            out.push(Patch { data: p });
        }
    }
    Ok(out)
}

fn standardize(mut v: [f64; PATCH_PIXELS]) -> [f64; PATCH_PIXELS] {
    let n = PATCH_PIXELS as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > FLAT_SIGMA {
        v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    } else {
        v = [0.0; PATCH_PIXELS];
    }
    v
}

/// Luminance map of the patch with zero mean and unit (population)
/// standard deviation; all zeros for a flat patch.
pub fn normalize_patch(patch: &Patch) -> [f64; PATCH_PIXELS] {
    let mut lum = [0.0; PATCH_PIXELS];
    for (i, px) in patch.data.chunks_exact(3).enumerate() {
        lum[i] = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
    }
    standardize(lum)
}

fn mask_map(mask: &Mask) -> [f64; PATCH_PIXELS] {
    let mut v = [0.0; PATCH_PIXELS];
    for (o, &m) in v.iter_mut().zip(mask.iter()) {
        *o = m as f64;
    }
    standardize(v)
}

fn templates() -> &'static [[f64; PATCH_PIXELS]; PREDICATES] {
    static T: OnceLock<[[f64; PATCH_PIXELS]; PREDICATES]> = OnceLock::new();
    T.get_or_init(|| {
        [
            mask_map(bitmaps::object_mask(ObjectType::Circle)),
            mask_map(bitmaps::object_mask(ObjectType::Square)),
            mask_map(bitmaps::object_mask(ObjectType::Cross)),
            mask_map(&AGENT_MASK),
        ]
    })
}

/// Detector scores in (circle, square, cross, agent) order, each the
/// absolute correlation with the template, in [0,1].
pub fn classify_patch(patch: &Patch) -> [f64; PREDICATES] {
    let p = normalize_patch(patch);
    let mut out = [0.0; PREDICATES];
    for (score, t) in out.iter_mut().zip(templates()) {
        let corr = p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / PATCH_PIXELS as f64;
        *score = corr.abs().clamp(0.0, 1.0);
    }
    out
}

/// 5×5×4 detector maps of a rendered observation.
pub fn build_object_maps(obs: &Observation) -> ChannelGrid {
    let mut maps = ChannelGrid::zeros(GRID, GRID, PREDICATES);
    for (i, patch) in extract_patches(obs).iter().enumerate() {
        let scores = classify_patch(patch);
        let start = i * PREDICATES;
        maps.data[start..start + PREDICATES].copy_from_slice(&scores);
    }
    maps
}

/// Per-cell argmax over detector channels, empty below the threshold.
pub fn detect_cell(scores: &[f64]) -> Detected {
    let (best, score) = scores
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
    if score < EMPTY_THRESHOLD {
        return Detected::Empty;
    }
    match best {
        AGENT_CHANNEL => Detected::Agent,
        i => Detected::Object(ObjectType::ALL[i]),
    }
}

/// Symbolic grid recovered from object maps.
pub fn reconstruct(maps: &ChannelGrid) -> [[Detected; GRID]; GRID] {
    let mut out = [[Detected::Empty; GRID]; GRID];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, d) in row.iter_mut().enumerate() {
            *d = detect_cell(maps.cell(r, c));
        }
    }
    out
}

/// Cell of the highest score in one channel; ties go to the first cell in
/// row-major order.
pub fn argmax_cell(maps: &ChannelGrid, ch: usize) -> Cell {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for r in 0..maps.rows {
        for c in 0..maps.cols {
            let v = maps.get(r, c, ch);
            if v > best.1 {
                best = ((r, c), v);
            }
        }
    }
    best.0
}

/// Nearest-neighbour block replication to `rows × cols`.
pub fn upsample_maps(maps: &ChannelGrid, rows: usize, cols: usize) -> Result<ChannelGrid> {
    let divisible = rows > 0
        && cols > 0
        && maps.rows > 0
        && maps.cols > 0
        && rows % maps.rows == 0
        && cols % maps.cols == 0;
    if !divisible {
        return Err(PerceptionError::NotDivisible {
            from_rows: maps.rows,
            from_cols: maps.cols,
            to_rows: rows,
            to_cols: cols,
        });
    }
    let (fr, fc) = (rows / maps.rows, cols / maps.cols);
    let k = maps.channels;
    let mut out = ChannelGrid::zeros(rows, cols, k);
    for r in 0..rows {
        for c in 0..cols {
            let dst = (r * cols + c) * k;
            out.data[dst..dst + k].copy_from_slice(maps.cell(r / fr, c / fc));
        }
    }
    Ok(out)
}
