//! Temporal and spatial anomaly tests, per-region thresholds and two-threshold
//! region growing.
//!
//! The temporal context compares a patch with the history of its own grid
//! location; the spatial context compares it with the patches around it in
//! the same clip. A patch whose combined test passes under the low threshold
//! becomes a seed, and seeds are grown over 8-connected patches that pass
//! under the high threshold.

mod model;

use std::collections::VecDeque;

use rayon::prelude::*;

pub use model::{train, ModelBuilder, TemporalModel, MODEL_MAGIC, MODEL_VERSION};

use crate::descriptor::{motion_fraction, Describer, PatchGrid, ShapeHistogram};
use crate::error::{Error, Result};
use crate::knn_stat::{assess, AnomalyScore, ScoringConfig, DEFAULT_K};
use crate::trajectory::TrajectorySet;

/// How the temporal and spatial decisions are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combine {
    #[default]
    Or,
    And,
}

/// Where the spatial context draws its comparison histograms from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpatialSource {
    /// Surrounding patches of the clip under test.
    #[default]
    SameClip,
    /// Training history of the surrounding locations.
    TrainingHistory,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub k: usize,
    pub t_low_temporal: f64,
    pub t_low_spatial: f64,
    pub t_high_temporal: f64,
    pub t_high_spatial: f64,
    /// Chebyshev radius of the spatial neighbourhood, in patches.
    pub spatial_radius: usize,
    /// Locations active in fewer training clips than this fraction are non-active.
    pub activity_min: f64,
    /// Subtracted from every threshold at non-active locations.
    pub nonactive_offset: f64,
    pub combine: Combine,
    /// Minimum fraction of histogram mass outside the origin bin for a patch to
    /// be scored at all.
    pub motion_floor: f64,
    pub spatial_source: SpatialSource,
    pub scoring: ScoringConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            t_low_temporal: -300.0,
            t_low_spatial: -400.0,
            t_high_temporal: -150.0,
            t_high_spatial: -200.0,
            spatial_radius: 2,
            activity_min: 0.1,
            nonactive_offset: 20.0,
            combine: Combine::Or,
            motion_floor: 0.05,
            spatial_source: SpatialSource::SameClip,
            scoring: ScoringConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(msg));
        if self.k < 2 {
            return fail(format!("k must be >= 2, got {}", self.k));
        }
        if !(self.t_low_temporal <= self.t_high_temporal) || !(self.t_low_spatial <= self.t_high_spatial) {
            return fail("low thresholds must not exceed high thresholds".into());
        }
        if self.spatial_radius == 0 {
            return fail("spatial_radius must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.activity_min) || !(0.0..=1.0).contains(&self.motion_floor) {
            return fail("activity_min and motion_floor are fractions in [0, 1]".into());
        }
        if !(self.nonactive_offset >= 0.0) {
            return fail("nonactive_offset must be >= 0".into());
        }
        if !(self.scoring.p_min > 0.0 && self.scoring.p_min <= 1.0) || !(self.scoring.sigma2_min > 0.0) {
            return fail("p_min must be in (0, 1] and sigma2_min > 0".into());
        }
        Ok(())
    }
}

fn pool_score(query: &[u32], pool: &[&[u32]], k: usize, scoring: &ScoringConfig) -> Result<AnomalyScore> {
    Ok(assess(query, pool, k, scoring)?.score)
}

/// Temporal score of `query` at location `m` against its training history.
pub fn score_temporal(query: &ShapeHistogram, model: &TemporalModel, m: usize, cfg: &DetectorConfig) -> Result<AnomalyScore> {
    let available = model.history_len(m);
    if available < cfg.k {
        return Err(Error::InsufficientHistory { location: m, available, k: cfg.k });
    }
    if motion_fraction(query.counts()) < cfg.motion_floor {
        return Ok(AnomalyScore::NORMAL);
    }
    pool_score(query.counts(), &model.history(m), cfg.k, &cfg.scoring)
}

/// Locations within Chebyshev distance `radius` of `m`, excluding `m`.
fn neighbourhood(grid: &PatchGrid, m: usize, radius: usize) -> impl Iterator<Item = usize> + '_ {
    let (c, r) = grid.cell(m);
    let rows = r.saturating_sub(radius)..(r + radius + 1).min(grid.rows);
    rows.flat_map(move |rr| {
        let cols = c.saturating_sub(radius)..(c + radius + 1).min(grid.cols);
        cols.map(move |cc| rr * grid.cols + cc)
    })
    .filter(move |&n| n != m)
}

fn spatial_from_pool(query: &[u32], pool: Vec<&[u32]>, cfg: &DetectorConfig) -> Result<AnomalyScore> {
    if motion_fraction(query) < cfg.motion_floor {
        return Ok(AnomalyScore::NORMAL);
    }
    let k = cfg.k.min(pool.len());
    if k < 2 {
        return Ok(AnomalyScore::NORMAL);
    }
    pool_score(query, &pool, k, &cfg.scoring)
}

/// Spatial score of location `m` against the moving patches around it in the
/// same clip. Pools with fewer than two members score as normal.
pub fn score_spatial(clip_histograms: &[ShapeHistogram], grid: &PatchGrid, m: usize, cfg: &DetectorConfig) -> Result<AnomalyScore> {
    if clip_histograms.len() != grid.len() {
        return Err(Error::GeometryMismatch(format!(
            "{} histograms for a {}-location grid",
            clip_histograms.len(),
            grid.len()
        )));
    }
    let pool = neighbourhood(grid, m, cfg.spatial_radius)
        .map(|n| clip_histograms[n].counts())
        .filter(|h| motion_fraction(h) >= cfg.motion_floor)
        .collect();
    spatial_from_pool(clip_histograms[m].counts(), pool, cfg)
}

/// Spatial score of location `m` against the training history of the
/// locations around it.
pub fn score_spatial_history(query: &ShapeHistogram, model: &TemporalModel, m: usize, cfg: &DetectorConfig) -> Result<AnomalyScore> {
    let pool = neighbourhood(model.grid(), m, cfg.spatial_radius)
        .flat_map(|n| model.history(n))
        .filter(|h| motion_fraction(h) >= cfg.motion_floor)
        .collect();
    spatial_from_pool(query.counts(), pool, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Seed,
    Grown,
}

impl Label {
    pub fn is_detected(self) -> bool {
        self != Label::Normal
    }
}

/// Temporal and spatial scores of every location of one clip, together with
/// what is needed to threshold them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipScores {
    pub grid: PatchGrid,
    pub temporal: Vec<f64>,
    pub spatial: Vec<f64>,
    /// Amount subtracted from the thresholds at each location (0 when active).
    pub offset: Vec<f64>,
    /// False where the location lacks training history and is always normal.
    pub eligible: Vec<bool>,
}

/// A low/high threshold pair per context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub low_temporal: f64,
    pub low_spatial: f64,
    pub high_temporal: f64,
    pub high_spatial: f64,
}

impl Thresholds {
    pub fn from_config(cfg: &DetectorConfig) -> Self {
        Self {
            low_temporal: cfg.t_low_temporal,
            low_spatial: cfg.t_low_spatial,
            high_temporal: cfg.t_high_temporal,
            high_spatial: cfg.t_high_spatial,
        }
    }

    /// Moves the whole threshold set so that the temporal low threshold sits
    /// at `t_p`; the spatial thresholds and both high thresholds keep their
    /// configured distance from it.
    pub fn swept(cfg: &DetectorConfig, t_p: f64) -> Self {
        let shift = t_p - cfg.t_low_temporal;
        Self {
            low_temporal: t_p,
            low_spatial: cfg.t_low_spatial + shift,
            high_temporal: cfg.t_high_temporal + shift,
            high_spatial: cfg.t_high_spatial + shift,
        }
    }
}

impl ClipScores {
    fn hit(&self, m: usize, t_temporal: f64, t_spatial: f64, combine: Combine) -> bool {
        if !self.eligible[m] {
            return false;
        }
        let t = self.temporal[m] < t_temporal - self.offset[m];
        let s = self.spatial[m] < t_spatial - self.offset[m];
        match combine {
            Combine::Or => t || s,
            Combine::And => t && s,
        }
    }

    /// Per-location sweep score: the location is a seed under
    /// `Thresholds::swept(cfg, t_p)` iff this value is `< t_p`.
    pub fn combined(&self, m: usize, cfg: &DetectorConfig) -> f64 {
        if !self.eligible[m] {
            return f64::INFINITY;
        }
        let t = self.temporal[m] + self.offset[m];
        let s = self.spatial[m] + self.offset[m] - (cfg.t_low_spatial - cfg.t_low_temporal);
        match cfg.combine {
            Combine::Or => t.min(s),
            Combine::And => t.max(s),
        }
    }

    /// Minimum sweep score over the grid.
    pub fn min_combined(&self, cfg: &DetectorConfig) -> f64 {
        (0..self.grid.len()).map(|m| self.combined(m, cfg)).fold(f64::INFINITY, f64::min)
    }

    /// Seeds under the low thresholds, grown by 8-connected flood fill over
    /// locations that pass under the high thresholds.
    pub fn label(&self, th: &Thresholds, combine: Combine) -> Vec<Label> {
        let g = &self.grid;
        let mut labels = vec![Label::Normal; g.len()];
        let mut queue = VecDeque::new();
        for (m, label) in labels.iter_mut().enumerate() {
            if self.hit(m, th.low_temporal, th.low_spatial, combine) {
                *label = Label::Seed;
                queue.push_back(m);
            }
        }
        while let Some(m) = queue.pop_front() {
            for n in neighbourhood(g, m, 1) {
                if labels[n] == Label::Normal && self.hit(n, th.high_temporal, th.high_spatial, combine) {
                    labels[n] = Label::Grown;
                    queue.push_back(n);
                }
            }
        }
        labels
    }
}

/// Detection result of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub clip_index: usize,
    pub scores: ClipScores,
    pub labels: Vec<Label>,
}

impl DetectionGrid {
    pub fn any_detected(&self) -> bool {
        self.labels.iter().any(|l| l.is_detected())
    }

    /// Row-major pixel mask of detected patches for a `width x height` frame.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<bool> {
        rasterize_labels(&self.scores.grid, &self.labels, width, height)
    }
}

pub fn rasterize_labels(grid: &PatchGrid, labels: &[Label], width: usize, height: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    for (m, l) in labels.iter().enumerate() {
        if l.is_detected() {
            let (xs, ys) = grid.region(m);
            for y in ys.filter(|&y| y < height) {
                for x in xs.clone().filter(|&x| x < width) {
                    mask[y * width + x] = true;
                }
            }
        }
    }
    mask
}

/// Scores every location of a clip from its patch histograms.
pub fn score_clip(hists: &[ShapeHistogram], model: &TemporalModel, cfg: &DetectorConfig) -> Result<ClipScores> {
    let grid = *model.grid();
    if hists.len() != grid.len() {
        return Err(Error::GeometryMismatch(format!(
            "clip has {} patches, model has {}",
            hists.len(),
            grid.len()
        )));
    }
    if let Some(h) = hists.iter().find(|h| h.layout() != model.layout()) {
        return Err(Error::GeometryMismatch(format!(
            "histogram layout {:?} differs from model layout {:?}",
            h.layout(),
            model.layout()
        )));
    }
    let per_location: Vec<(f64, f64, f64, bool)> = (0..grid.len())
        .into_par_iter()
        .map(|m| -> Result<_> {
            let eligible = !model.insufficient(m, cfg.k);
            let temporal = if eligible { score_temporal(&hists[m], model, m, cfg)?.0 } else { 0.0 };
            let spatial = match cfg.spatial_source {
                SpatialSource::SameClip => score_spatial(hists, &grid, m, cfg)?,
                SpatialSource::TrainingHistory => score_spatial_history(&hists[m], model, m, cfg)?,
            };
            let offset = if model.activity_rate(m) < cfg.activity_min { cfg.nonactive_offset } else { 0.0 };
            Ok((temporal, spatial.0, offset, eligible))
        })
        .collect::<Result<_>>()?;
    let mut scores = ClipScores {
        grid,
        temporal: Vec::with_capacity(grid.len()),
        spatial: Vec::with_capacity(grid.len()),
        offset: Vec::with_capacity(grid.len()),
        eligible: Vec::with_capacity(grid.len()),
    };
    for (t, s, o, e) in per_location {
        scores.temporal.push(t);
        scores.spatial.push(s);
        scores.offset.push(o);
        scores.eligible.push(e);
    }
    Ok(scores)
}

/// Full detection for one clip: describe, score, threshold and grow.
pub fn detect_clip(
    test_clip: &TrajectorySet,
    clip_index: usize,
    model: &TemporalModel,
    cfg: &DetectorConfig,
) -> Result<DetectionGrid> {
    if test_clip.len() != model.clip_len() {
        return Err(Error::GeometryMismatch(format!(
            "test clip has {} frames, model was trained on {}",
            test_clip.len(),
            model.clip_len()
        )));
    }
    let grid = *model.grid();
    let describer = Describer::new(test_clip.width(), test_clip.height(), grid, *model.layout())?;
    let hists = describer.describe_all(test_clip)?;
    detect_histograms(&hists, clip_index, model, cfg)
}

/// Detection from precomputed patch histograms.
pub fn detect_histograms(
    hists: &[ShapeHistogram],
    clip_index: usize,
    model: &TemporalModel,
    cfg: &DetectorConfig,
) -> Result<DetectionGrid> {
    cfg.validate()?;
    let scores = score_clip(hists, model, cfg)?;
    let labels = scores.label(&Thresholds::from_config(cfg), cfg.combine);
    Ok(DetectionGrid { clip_index, scores, labels })
}
