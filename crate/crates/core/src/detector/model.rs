//! Per-location training histograms and their binary file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "STAM"  version:u32
//! cols:u32 rows:u32 patch_w:u32 patch_h:u32
//! clip_len:u32 mag_bins:u32 ang_bins:u32 r_max:f64
//! M times: count:u32, then count * N u32 bin counts
//! M times: activity_rate:f64
//! ```

use std::fs;
use std::path::Path;

use crate::descriptor::{motion_fraction, BinLayout, Describer, PatchGrid, ShapeHistogram};
use crate::error::{Error, Result};
use crate::trajectory::TrajectorySet;

pub const MODEL_MAGIC: &[u8; 4] = b"STAM";
pub const MODEL_VERSION: u32 = 1;

/// Training history of every grid location.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModel {
    grid: PatchGrid,
    clip_len: usize,
    layout: BinLayout,
    /// Histograms of location `m`, concatenated (`count * N` entries).
    pools: Vec<Vec<u32>>,
    activity: Vec<f64>,
}

impl TemporalModel {
    pub fn from_parts(
        grid: PatchGrid,
        clip_len: usize,
        layout: BinLayout,
        pools: Vec<Vec<u32>>,
        activity: Vec<f64>,
    ) -> Result<Self> {
        let n = layout.bins();
        if pools.len() != grid.len() || activity.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "model for {} locations got {} pools and {} activity rates",
                grid.len(),
                pools.len(),
                activity.len()
            )));
        }
        if let Some(p) = pools.iter().find(|p| p.len() % n != 0) {
            return Err(Error::BinCountMismatch(n, p.len() % n));
        }
        if activity.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidInput("activity rates must lie in [0, 1]".into()));
        }
        Ok(Self { grid, clip_len, layout, pools, activity })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn clip_len(&self) -> usize {
        self.clip_len
    }

    pub fn layout(&self) -> &BinLayout {
        &self.layout
    }

    /// Number of training histograms stored for location `m`.
    pub fn history_len(&self, m: usize) -> usize {
        self.pools[m].len() / self.layout.bins()
    }

    /// Training histograms of location `m`.
    pub fn history(&self, m: usize) -> Vec<&[u32]> {
        self.pools[m].chunks_exact(self.layout.bins()).collect()
    }

    /// Fraction of training clips in which location `m` showed motion.
    pub fn activity_rate(&self, m: usize) -> f64 {
        self.activity[m]
    }

    /// Whether location `m` has too little history for `k` neighbours.
    pub fn insufficient(&self, m: usize, k: usize) -> bool {
        self.history_len(m) < k
    }

    /// Number of locations with fewer than `k` training histograms.
    pub fn insufficient_count(&self, k: usize) -> usize {
        (0..self.grid.len()).filter(|&m| self.insufficient(m, k)).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let header = [
            MODEL_VERSION,
            self.grid.cols as u32,
            self.grid.rows as u32,
            self.grid.patch_w as u32,
            self.grid.patch_h as u32,
            self.clip_len as u32,
            self.layout.mag_bins as u32,
            self.layout.ang_bins as u32,
        ];
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.layout.r_max.to_le_bytes());
        for (m, pool) in self.pools.iter().enumerate() {
            out.extend_from_slice(&(self.history_len(m) as u32).to_le_bytes());
            for c in pool {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        for a in &self.activity {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out
    }

    /// Parses a model file image; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadModel { path: path.to_path_buf(), reason };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated magic".into()))? != MODEL_MAGIC {
            return Err(bad("missing STAM magic".into()));
        }
        let mut u32s = [0u32; 8];
        for v in u32s.iter_mut() {
            *v = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        }
        let [version, cols, rows, patch_w, patch_h, clip_len, mag_bins, ang_bins] = u32s.map(|v| v as usize);
        if version as u32 != MODEL_VERSION {
            return Err(bad(format!("unknown format version {version}")));
        }
        let r_max = r.f64().ok_or_else(|| bad("truncated header".into()))?;
        let layout = BinLayout::new(mag_bins, ang_bins, r_max).map_err(|e| bad(e.to_string()))?;
        if cols == 0 || rows == 0 || patch_w == 0 || patch_h == 0 || clip_len < 2 {
            return Err(bad("degenerate geometry".into()));
        }
        let grid = PatchGrid { patch_w, patch_h, cols, rows };
        let n = layout.bins();
        let mut pools = Vec::with_capacity(grid.len());
        for m in 0..grid.len() {
            let count = r.u32().ok_or_else(|| bad(format!("truncated at location {m}")))? as usize;
            let raw = r
                .take(count * n * 4)
                .ok_or_else(|| bad(format!("truncated histograms at location {m}")))?;
            pools.push(raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect());
        }
        let mut activity = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            activity.push(r.f64().ok_or_else(|| bad("truncated activity rates".into()))?);
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::from_parts(grid, clip_len, layout, pools, activity).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Accumulates training clips one at a time.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    describer: Describer,
    clip_len: usize,
    pools: Vec<Vec<u32>>,
    active: Vec<u32>,
    clips: u32,
}

impl ModelBuilder {
    pub fn new(describer: Describer, clip_len: usize) -> Self {
        let m = describer.grid().len();
        Self { describer, clip_len, pools: vec![Vec::new(); m], active: vec![0; m], clips: 0 }
    }

    pub fn add_clip(&mut self, traj: &TrajectorySet) -> Result<()> {
        if traj.len() != self.clip_len {
            return Err(Error::GeometryMismatch(format!(
                "training clip has {} frames, model expects {}",
                traj.len(),
                self.clip_len
            )));
        }
        let hists = self.describer.describe_all(traj)?;
        self.add_histograms(&hists)
    }

    /// Appends one clip's worth of precomputed patch histograms.
    pub fn add_histograms(&mut self, hists: &[ShapeHistogram]) -> Result<()> {
        if hists.len() != self.pools.len() {
            return Err(Error::GeometryMismatch(format!(
                "{} histograms for a {}-location grid",
                hists.len(),
                self.pools.len()
            )));
        }
        for (m, h) in hists.iter().enumerate() {
            if h.layout() != self.describer.layout() {
                return Err(Error::BinCountMismatch(self.describer.layout().bins(), h.counts().len()));
            }
            self.pools[m].extend_from_slice(h.counts());
            if motion_fraction(h.counts()) > 0.0 {
                self.active[m] += 1;
            }
        }
        self.clips += 1;
        Ok(())
    }

    pub fn clips(&self) -> usize {
        self.clips as usize
    }

    pub fn finish(self) -> Result<TemporalModel> {
        if self.clips == 0 {
            return Err(Error::EmptyTraining);
        }
        let activity = self.active.iter().map(|&a| a as f64 / self.clips as f64).collect();
        TemporalModel::from_parts(*self.describer.grid(), self.clip_len, *self.describer.layout(), self.pools, activity)
    }
}

/// Builds a model from whole training clips.
pub fn train(training_clips: &[TrajectorySet], grid: &PatchGrid, layout: &BinLayout) -> Result<TemporalModel> {
    let first = training_clips.first().ok_or(Error::EmptyTraining)?;
    let describer = Describer::new(first.width(), first.height(), *grid, *layout)?;
    let mut builder = ModelBuilder::new(describer, first.len());
    for clip in training_clips {
        builder.add_clip(clip)?;
    }
    builder.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_io::FlowField;
    use crate::trajectory::{advect, Clip};

    fn static_clip(w: usize, h: usize, t: usize) -> TrajectorySet {
        let flows = vec![FlowField::zeros(w, h); t - 1];
        advect(&Clip::new(0, &flows).unwrap())
    }

    #[test]
    fn static_training_has_no_activity() {
        let grid = PatchGrid::new(12, 9, 3, 3).unwrap();
        let layout = BinLayout::for_clip(4);
        let model = train(&[static_clip(12, 9, 4)], &grid, &layout).unwrap();
        for m in 0..grid.len() {
            assert_eq!(model.activity_rate(m), 0.0);
            assert_eq!(model.history_len(m), 1);
            assert_eq!(model.history(m)[0][0], 27);
            assert!(model.insufficient(m, 20));
        }
        assert_eq!(model.insufficient_count(1), 0);
        assert!(matches!(train(&[], &grid, &layout), Err(Error::EmptyTraining)));
    }

    #[test]
    fn file_round_trip_and_rejections() {
        let grid = PatchGrid::new(6, 6, 3, 3).unwrap();
        let layout = BinLayout::new(2, 4, 3.0).unwrap();
        let flows = vec![FlowField::uniform(6, 6, 1.0, 0.0); 3];
        let moving = advect(&Clip::new(0, &flows).unwrap());
        let model = train(&[moving, static_clip(6, 6, 4)], &grid, &layout).unwrap();
        assert_eq!(model.activity_rate(0), 0.5);
        let p = Path::new("m.stam");
        let bytes = model.to_bytes();
        assert_eq!(TemporalModel::from_bytes(&bytes, p).unwrap(), model);
        // 4 magic + 8*4 header + 8 r_max + 4 locations * (4 + 2*8*4) + 4 * 8
        assert_eq!(bytes.len(), 4 + 32 + 8 + 4 * (4 + 64) + 32);

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(TemporalModel::from_bytes(&wrong_version, p), Err(Error::BadModel { .. })));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(TemporalModel::from_bytes(&wrong_magic, p), Err(Error::BadModel { .. })));
        assert!(matches!(TemporalModel::from_bytes(&bytes[..bytes.len() - 1], p), Err(Error::BadModel { .. })));
    }
}
