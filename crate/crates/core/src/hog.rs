//! Dense histogram-of-oriented-gradients descriptors.
//!
//! Gradients use the `[-1, 0, 1]` kernel (one-sided differences on the image
//! border). Each pixel votes its magnitude into the two nearest orientation
//! bins of its cell, bins being centred on multiples of the bin width. Blocks
//! of cells are L2-Hys normalized.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::renderer::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HogError {
    #[error("image {width}x{height} is too small for the descriptor layout")]
    ImageTooSmall { width: usize, height: usize },
    #[error("invalid HOG parameters: {0}")]
    InvalidParams(String),
    #[error("descriptor lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HogParams {
    /// Cell side in pixels.
    pub cell_size: usize,
    /// Block side in cells.
    pub block_size: usize,
    /// Block step in cells.
    pub block_stride: usize,
    pub n_bins: usize,
    /// Signed orientations span `[0, 2pi)`, unsigned `[0, pi)`.
    pub signed: bool,
    /// L2-Hys clipping threshold.
    pub clip: f64,
    pub epsilon: f64,
}

impl Default for HogParams {
    fn default() -> Self {
        Self {
            cell_size: 8,
            block_size: 2,
            block_stride: 1,
            n_bins: 9,
            signed: false,
            clip: 0.2,
            epsilon: 1e-6,
        }
    }
}

impl HogParams {
    pub fn validate(&self) -> Result<(), HogError> {
        let bad = |m: &str| Err(HogError::InvalidParams(m.to_string()));
        if self.cell_size < 2 {
            return bad("cell_size must be at least 2");
        }
        if self.n_bins < 2 {
            return bad("n_bins must be at least 2");
        }
        if self.block_size < 1 || self.block_stride < 1 {
            return bad("block_size and block_stride must be positive");
        }
        if !(self.clip > 0.0) || !(self.epsilon > 0.0) {
            return bad("clip and epsilon must be positive");
        }
        Ok(())
    }

    pub fn orientation_range(&self) -> f64 {
        if self.signed {
            2.0 * PI
        } else {
            PI
        }
    }

    /// Descriptor geometry for an image, or `ImageTooSmall`.
    pub fn layout(&self, width: usize, height: usize) -> Result<Layout, HogError> {
        self.validate()?;
        let cells_x = width / self.cell_size;
        let cells_y = height / self.cell_size;
        if width < 3 || height < 3 || cells_x < self.block_size || cells_y < self.block_size {
            return Err(HogError::ImageTooSmall { width, height });
        }
        Ok(Layout {
            cells_x,
            cells_y,
            blocks_x: (cells_x - self.block_size) / self.block_stride + 1,
            blocks_y: (cells_y - self.block_size) / self.block_stride + 1,
            block_cells: self.block_size * self.block_size,
            n_bins: self.n_bins,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub cells_x: usize,
    pub cells_y: usize,
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub block_cells: usize,
    pub n_bins: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.blocks_x * self.blocks_y * self.block_cells * self.n_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattened `(blocks_y, blocks_x, block_cells, n_bins)` descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl Descriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One row per block: `block_y,block_x,v0,v1,...`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let per_block = self.layout.block_cells * self.layout.n_bins;
        for (i, block) in self.values.chunks(per_block).enumerate() {
            write!(out, "{},{}", i / self.layout.blocks_x, i % self.layout.blocks_x)?;
            for v in block {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Per-pixel gradient magnitude and orientation (radians), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f64>,
    pub orientation: Vec<f64>,
}

#[inline]
fn fold_orientation(gx: f64, gy: f64, signed: bool) -> f64 {
    let mut theta = gy.atan2(gx);
    if signed {
        if theta < 0.0 {
            theta += 2.0 * PI;
        }
        if theta >= 2.0 * PI {
            theta = 0.0;
        }
    } else {
        if theta < 0.0 {
            theta += PI;
        }
        if theta >= PI {
            theta -= PI;
        }
    }
    theta
}

/// `[-1, 0, 1]` derivative at `(x, y)`; one-sided on the border.
#[inline]
fn derivative(img: &Image, x: usize, y: usize) -> (f64, f64) {
    let (w, h) = (img.width(), img.height());
    let at = |x: usize, y: usize| img.get(x, y) as f64;
    let gx = if x == 0 {
        at(1, y) - at(0, y)
    } else if x == w - 1 {
        at(x, y) - at(x - 1, y)
    } else {
        at(x + 1, y) - at(x - 1, y)
    };
    let gy = if y == 0 {
        at(x, 1) - at(x, 0)
    } else if y == h - 1 {
        at(x, y) - at(x, y - 1)
    } else {
        at(x, y + 1) - at(x, y - 1)
    };
    (gx, gy)
}

pub fn compute_gradients(img: &Image, signed: bool) -> Result<Gradients, HogError> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(HogError::ImageTooSmall { width: w, height: h });
    }
    let mut magnitude = Vec::with_capacity(w * h);
    let mut orientation = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = derivative(img, x, y);
            magnitude.push((gx * gx + gy * gy).sqrt());
            orientation.push(fold_orientation(gx, gy, signed));
        }
    }
    Ok(Gradients {
        width: w,
        height: h,
        magnitude,
        orientation,
    })
}

/// Splits a magnitude vote between the two bins nearest to `theta`.
#[inline]
fn vote(hist: &mut [f64], theta: f64, magnitude: f64, bin_width: f64) {
    let n = hist.len();
    let pos = theta / bin_width;
    let lo = pos.floor();
    let frac = pos - lo;
    let b0 = (lo as usize) % n;
    let b1 = (b0 + 1) % n;
    hist[b0] += magnitude * (1.0 - frac);
    hist[b1] += magnitude * frac;
}

pub fn compute_hog(img: &Image, params: &HogParams) -> Result<Descriptor, HogError> {
    let layout = params.layout(img.width(), img.height())?;
    let cs = params.cell_size;
    let nb = params.n_bins;
    let bin_width = params.orientation_range() / nb as f64;
    let mut cells = vec![0.0f64; layout.cells_x * layout.cells_y * nb];

    // Gradients vanish wherever the 3x3 neighbourhood equals the background,
    // so only the region around the non-background support needs visiting.
    let background = img.get(0, 0);
    if let Some((sx0, sy0, sx1, sy1)) = img.support(background) {
        let x_end = (sx1 + 2).min(layout.cells_x * cs);
        let y_end = (sy1 + 2).min(layout.cells_y * cs);
        let x_start = sx0.saturating_sub(1);
        let y_start = sy0.saturating_sub(1);
        for y in y_start..y_end {
            let cy = y / cs;
            for x in x_start..x_end {
                let (gx, gy) = derivative(img, x, y);
                let m = (gx * gx + gy * gy).sqrt();
                if m == 0.0 {
                    continue;
                }
                let theta = fold_orientation(gx, gy, params.signed);
                let c = (cy * layout.cells_x + x / cs) * nb;
                vote(&mut cells[c..c + nb], theta, m, bin_width);
            }
        }
    }

    let mut values = vec![0.0f64; layout.len()];
    let per_block = layout.block_cells * nb;
    for by in 0..layout.blocks_y {
        for bx in 0..layout.blocks_x {
            let start = (by * layout.blocks_x + bx) * per_block;
            let block = &mut values[start..start + per_block];
            let mut k = 0;
            for dy in 0..params.block_size {
                for dx in 0..params.block_size {
                    let cy = by * params.block_stride + dy;
                    let cx = bx * params.block_stride + dx;
                    let c = (cy * layout.cells_x + cx) * nb;
                    block[k..k + nb].copy_from_slice(&cells[c..c + nb]);
                    k += nb;
                }
            }
            l2_hys(block, params.clip, params.epsilon);
        }
    }
    Ok(Descriptor { values, layout })
}

/// L2 normalize, clip, renormalize.
pub fn l2_hys(block: &mut [f64], clip: f64, epsilon: f64) {
    let norm = |b: &[f64]| (b.iter().map(|v| v * v).sum::<f64>() + epsilon * epsilon).sqrt();
    let n = norm(block);
    for v in block.iter_mut() {
        *v = (*v / n).min(clip);
    }
    let n = norm(block);
    for v in block.iter_mut() {
        *v /= n;
    }
}

/// L1 distance between two descriptors.
pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> Result<f64, HogError> {
    l1_distance(&a.values, &b.values)
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<f64, HogError> {
    if a.len() != b.len() {
        return Err(HogError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}
