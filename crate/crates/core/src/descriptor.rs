//! Patch partition and polar shape histograms of short-term trajectories.
//!
//! Every trajectory starting in a patch is translated so its start point sits
//! at the origin; the remaining `T - 1` points are counted in a grid of
//! `mag_bins x ang_bins` cells that are uniform in radius and angle.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::trajectory::TrajectorySet;

/// Non-overlapping, axis-aligned patches covering the top-left of a frame.
/// Pixels right of the last full column or below the last full row are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_w: usize,
    pub patch_h: usize,
    pub cols: usize,
    pub rows: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_w: usize, patch_h: usize) -> Result<Self> {
        if patch_w == 0 || patch_h == 0 || patch_w > width || patch_h > height {
            return Err(Error::InvalidPatchSize { width, height, patch_w, patch_h });
        }
        Ok(Self { patch_w, patch_h, cols: width / patch_w, rows: height / patch_h })
    }

    /// Total patch count `M`.
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column and row of patch `m` (`m = row * cols + col`).
    pub fn cell(&self, m: usize) -> (usize, usize) {
        (m % self.cols, m / self.cols)
    }

    /// Pixel ranges `(xs, ys)` covered by patch `m`.
    pub fn region(&self, m: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (c, r) = self.cell(m);
        (c * self.patch_w..(c + 1) * self.patch_w, r * self.patch_h..(r + 1) * self.patch_h)
    }

    /// Patch containing pixel `(x, y)`, if the pixel is covered.
    pub fn patch_at(&self, x: usize, y: usize) -> Option<usize> {
        let (c, r) = (x / self.patch_w, y / self.patch_h);
        (c < self.cols && r < self.rows).then_some(r * self.cols + c)
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch_w * self.patch_h
    }
}

pub fn build_grid(width: usize, height: usize, patch_w: usize, patch_h: usize) -> Result<PatchGrid> {
    PatchGrid::new(width, height, patch_w, patch_h)
}

/// Polar bin geometry shared by all histograms of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinLayout {
    pub mag_bins: usize,
    pub ang_bins: usize,
    /// Outer radius in pixels; the last magnitude bin absorbs everything beyond it.
    pub r_max: f64,
}

impl BinLayout {
    pub fn new(mag_bins: usize, ang_bins: usize, r_max: f64) -> Result<Self> {
        if mag_bins == 0 || ang_bins == 0 || !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bin layout needs mag_bins, ang_bins >= 1 and finite r_max > 0 (got {mag_bins}, {ang_bins}, {r_max})"
            )));
        }
        Ok(Self { mag_bins, ang_bins, r_max })
    }

    /// Default layout for clips of `clip_len` frames: 8x8 bins, `r_max = T - 1`.
    pub fn for_clip(clip_len: usize) -> Self {
        Self { mag_bins: 8, ang_bins: 8, r_max: clip_len.saturating_sub(1).max(1) as f64 }
    }

    /// Total bin count `N`.
    pub fn bins(&self) -> usize {
        self.mag_bins * self.ang_bins
    }

    /// Bin index of a translated point.
    ///
    /// Magnitude bin `min(floor(r * mag_bins / r_max), mag_bins - 1)`; angle
    /// `atan2(dy, dx)` folded into `[0, 2pi)` and split into `ang_bins` equal
    /// sectors. The origin goes to bin 0. Index is `mag * ang_bins + ang`.
    #[inline]
    pub fn bin_of(&self, dx: f64, dy: f64) -> usize {
        let r = dx.hypot(dy);
        if r == 0.0 {
            return 0;
        }
        let mag = ((r * self.mag_bins as f64 / self.r_max) as usize).min(self.mag_bins - 1);
        let mut theta = dy.atan2(dx);
        if theta < 0.0 {
            theta += TAU;
        }
        let ang = ((theta * self.ang_bins as f64 / TAU) as usize).min(self.ang_bins - 1);
        mag * self.ang_bins + ang
    }
}

pub fn bin_of(dx: f64, dy: f64, layout: &BinLayout) -> usize {
    layout.bin_of(dx, dy)
}

/// Bin counts `h(n)` of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeHistogram {
    layout: BinLayout,
    counts: Vec<u32>,
}

impl ShapeHistogram {
    pub fn zeros(layout: BinLayout) -> Self {
        Self { layout, counts: vec![0; layout.bins()] }
    }

    pub fn from_counts(layout: BinLayout, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != layout.bins() {
            return Err(Error::BinCountMismatch(layout.bins(), counts.len()));
        }
        Ok(Self { layout, counts })
    }

    pub fn layout(&self) -> &BinLayout {
        &self.layout
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn into_counts(self) -> Vec<u32> {
        self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Multiplies every count by `factor`.
    pub fn scaled(&self, factor: u32) -> Self {
        Self { layout: self.layout, counts: self.counts.iter().map(|&c| c * factor).collect() }
    }
}

impl AsRef<[u32]> for ShapeHistogram {
    fn as_ref(&self) -> &[u32] {
        &self.counts
    }
}

/// Counts outside bin 0, i.e. points that moved out of the innermost sector
/// that also holds the origin.
pub fn off_origin_mass(counts: &[u32]) -> u64 {
    counts.iter().skip(1).map(|&c| c as u64).sum()
}

/// Fraction of histogram mass outside bin 0; zero for an empty histogram.
pub fn motion_fraction(counts: &[u32]) -> f64 {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total == 0 {
        0.0
    } else {
        off_origin_mass(counts) as f64 / total as f64
    }
}

/// Magnitude and angle marginals of a shape histogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitHistograms {
    pub mag: Vec<u32>,
    pub ang: Vec<u32>,
}

pub fn split(hist: &ShapeHistogram) -> SplitHistograms {
    let BinLayout { mag_bins, ang_bins, .. } = hist.layout;
    let mut mag = vec![0u32; mag_bins];
    let mut ang = vec![0u32; ang_bins];
    for (i, &c) in hist.counts.iter().enumerate() {
        mag[i / ang_bins] += c;
        ang[i % ang_bins] += c;
    }
    SplitHistograms { mag, ang }
}

/// Histogram of the trajectories that start inside patch `m`.
pub fn describe_patch(traj: &TrajectorySet, grid: &PatchGrid, m: usize, layout: &BinLayout) -> ShapeHistogram {
    let mut counts = vec![0u32; layout.bins()];
    let (xs, ys) = grid.region(m);
    for y in ys {
        for x in xs.clone() {
            let points = traj.trajectory(x, y);
            let [x0, y0] = points[0];
            for &[px, py] in &points[1..] {
                counts[layout.bin_of((px - x0) as f64, (py - y0) as f64)] += 1;
            }
        }
    }
    ShapeHistogram { layout: *layout, counts }
}

/// Precomputed `bin_of` over every integer displacement reachable in a
/// `width x height` frame; produces the same histograms as [`describe_patch`].
#[derive(Debug, Clone)]
pub struct Describer {
    grid: PatchGrid,
    layout: BinLayout,
    width: usize,
    height: usize,
    table: Vec<u16>,
}

impl Describer {
    pub fn new(width: usize, height: usize, grid: PatchGrid, layout: BinLayout) -> Result<Self> {
        if grid.cols * grid.patch_w > width || grid.rows * grid.patch_h > height {
            return Err(Error::GeometryMismatch(format!(
                "{}x{} grid of {}x{} patches does not fit a {width}x{height} frame",
                grid.cols, grid.rows, grid.patch_w, grid.patch_h
            )));
        }
        if layout.bins() > u16::MAX as usize {
            return Err(Error::InvalidInput(format!("too many bins ({})", layout.bins())));
        }
        let (tw, th) = (2 * width - 1, 2 * height - 1);
        let mut table = vec![0u16; tw * th];
        for j in 0..th {
            let dy = j as f64 - (height - 1) as f64;
            for i in 0..tw {
                let dx = i as f64 - (width - 1) as f64;
                table[j * tw + i] = layout.bin_of(dx, dy) as u16;
            }
        }
        Ok(Self { grid, layout, width, height, table })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn layout(&self) -> &BinLayout {
        &self.layout
    }

    pub fn patch(&self, traj: &TrajectorySet, m: usize) -> Result<ShapeHistogram> {
        if (traj.width(), traj.height()) != (self.width, self.height) {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height),
                found: (traj.width(), traj.height()),
            });
        }
        Ok(self.patch_unchecked(traj, m))
    }

    fn patch_unchecked(&self, traj: &TrajectorySet, m: usize) -> ShapeHistogram {
        let tw = 2 * self.width - 1;
        let (ox, oy) = (self.width as i32 - 1, self.height as i32 - 1);
        let mut counts = vec![0u32; self.layout.bins()];
        let (xs, ys) = self.grid.region(m);
        for y in ys {
            for x in xs.clone() {
                let points = traj.trajectory(x, y);
                let [x0, y0] = points[0];
                for &[px, py] in &points[1..] {
                    let i = (px - x0 + ox) as usize;
                    let j = (py - y0 + oy) as usize;
                    counts[self.table[j * tw + i] as usize] += 1;
                }
            }
        }
        ShapeHistogram { layout: self.layout, counts }
    }

    /// Histograms of every patch, indexed by patch number.
    pub fn describe_all(&self, traj: &TrajectorySet) -> Result<Vec<ShapeHistogram>> {
        if (traj.width(), traj.height()) != (self.width, self.height) {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height),
                found: (traj.width(), traj.height()),
            });
        }
        Ok((0..self.grid.len())
            .into_par_iter()
            .map(|m| self.patch_unchecked(traj, m))
            .collect())
    }
}
