//! Sequence-level glue: clips from a flow sequence, training over many
//! sequences, and per-frame views of a detection run.

use std::fmt::Write as _;

use crate::descriptor::{BinLayout, Describer, PatchGrid};
use crate::detector::{detect_clip, ClipScores, DetectionGrid, DetectorConfig, Label, ModelBuilder, TemporalModel, Thresholds};
use crate::error::{Error, Result};
use crate::evaluation::{frame_counts, overlap_suffices, pixel_counts, GroundTruth, LevelCounts, Mask};
use crate::flow_io::FlowField;
use crate::trajectory::{advect, segment_clips, Clip, TrajectorySet};

fn sequence_dims(flows: &[FlowField]) -> Result<(usize, usize)> {
    let first = flows.first().ok_or_else(|| Error::InvalidInput("empty flow sequence".into()))?;
    Ok(first.dims())
}

/// Trajectories of every complete clip of a sequence of `flows.len() + 1` frames.
pub fn clip_trajectories(flows: &[FlowField], clip_len: usize) -> Result<Vec<TrajectorySet>> {
    let (w, h) = sequence_dims(flows)?;
    segment_clips(flows.len() + 1, clip_len)?
        .into_iter()
        .map(|r| Ok(advect(&Clip::with_dims(r.start, &flows[r.start..r.end - 1], w, h)?)))
        .collect()
}

/// Trains one model on every clip of every sequence.
pub fn train_sequences<'a, I>(sequences: I, grid: PatchGrid, layout: BinLayout, clip_len: usize) -> Result<TemporalModel>
where
    I: IntoIterator<Item = &'a [FlowField]>,
{
    let mut builder: Option<ModelBuilder> = None;
    let mut dims = None;
    for flows in sequences {
        let d = sequence_dims(flows)?;
        if *dims.get_or_insert(d) != d {
            return Err(Error::DimensionMismatch { expected: dims.unwrap(), found: d });
        }
        let b = match builder.as_mut() {
            Some(b) => b,
            None => builder.insert(ModelBuilder::new(Describer::new(d.0, d.1, grid, layout)?, clip_len)),
        };
        for traj in clip_trajectories(flows, clip_len)? {
            b.add_clip(&traj)?;
        }
    }
    builder.ok_or(Error::EmptyTraining)?.finish()
}

/// Detection results of every clip of one test sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDetection {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub clip_len: usize,
    pub clips: Vec<DetectionGrid>,
}

pub fn detect_sequence(flows: &[FlowField], model: &TemporalModel, cfg: &DetectorConfig) -> Result<SequenceDetection> {
    let (width, height) = sequence_dims(flows)?;
    let clip_len = model.clip_len();
    let clips = clip_trajectories(flows, clip_len)?
        .iter()
        .enumerate()
        .map(|(i, traj)| detect_clip(traj, i, model, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceDetection { width, height, frame_count: flows.len() + 1, clip_len, clips })
}

impl SequenceDetection {
    /// Clip covering `frame`; frames past the last complete clip have none.
    pub fn clip_of(&self, frame: usize) -> Option<&DetectionGrid> {
        self.clips.get(frame / self.clip_len)
    }

    pub fn frame_flags(&self) -> Vec<bool> {
        (0..self.frame_count).map(|f| self.clip_of(f).is_some_and(DetectionGrid::any_detected)).collect()
    }

    /// Per-frame sweep score: the frame is flagged at `t_p` iff its score is `< t_p`.
    /// Frames outside every clip score `+inf`.
    pub fn frame_scores(&self, cfg: &DetectorConfig) -> Vec<f64> {
        let per_clip: Vec<f64> = self.clips.iter().map(|c| c.scores.min_combined(cfg)).collect();
        (0..self.frame_count)
            .map(|f| per_clip.get(f / self.clip_len).copied().unwrap_or(f64::INFINITY))
            .collect()
    }

    fn masks_from(&self, labels: &[Vec<Label>]) -> Vec<Mask> {
        let rasters: Vec<Mask> = self
            .clips
            .iter()
            .zip(labels)
            .map(|(c, l)| {
                let bits = crate::detector::rasterize_labels(&c.scores.grid, l, self.width, self.height);
                Mask::new(self.width, self.height, bits).expect("raster matches frame size")
            })
            .collect();
        (0..self.frame_count)
            .map(|f| rasters.get(f / self.clip_len).cloned().unwrap_or_else(|| Mask::empty(self.width, self.height)))
            .collect()
    }

    /// Per-frame detection masks under the configured thresholds.
    pub fn frame_masks(&self) -> Vec<Mask> {
        let labels: Vec<Vec<Label>> = self.clips.iter().map(|c| c.labels.clone()).collect();
        self.masks_from(&labels)
    }

    /// Per-frame masks after relabelling every clip under `th`.
    pub fn masks_at(&self, th: &Thresholds, cfg: &DetectorConfig) -> Vec<Mask> {
        let labels: Vec<Vec<Label>> = self.clips.iter().map(|c| c.scores.label(th, cfg.combine)).collect();
        self.masks_from(&labels)
    }

    pub fn frame_counts_at(&self, cfg: &DetectorConfig, gt: &GroundTruth, t_p: f64) -> Result<LevelCounts> {
        let flags: Vec<bool> = self.frame_scores(cfg).iter().map(|&s| s < t_p).collect();
        frame_counts(&flags, gt)
    }

    pub fn pixel_counts_at(&self, cfg: &DetectorConfig, gt: &GroundTruth, t_p: f64) -> Result<LevelCounts> {
        pixel_counts(&self.masks_at(&Thresholds::swept(cfg, t_p), cfg), gt)
    }

    /// `frame,location,L_temporal,L_spatial,label` with one row per clip and
    /// location; `frame` is the first frame of the clip.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("frame,location,L_temporal,L_spatial,label\n");
        for c in &self.clips {
            let frame = c.clip_index * self.clip_len;
            for m in 0..c.labels.len() {
                let label = match c.labels[m] {
                    Label::Normal => "normal",
                    Label::Seed => "seed",
                    Label::Grown => "grown",
                };
                // shortest round-trip formatting, so the file re-parses exactly
                let _ = writeln!(out, "{frame},{m},{:?},{:?},{label}", c.scores.temporal[m], c.scores.spatial[m]);
            }
        }
        out
    }
}

/// Pixel-level tallies for many thresholds without rasterizing a mask per
/// frame: ground-truth pixels are binned by patch once, and each threshold
/// only relabels the grid. Agrees exactly with
/// [`SequenceDetection::pixel_counts_at`].
#[derive(Debug, Clone)]
pub struct PixelScorer {
    /// Per frame: `None` if normal, else ground-truth pixels per patch and in total.
    truth: Vec<Option<(Vec<u32>, usize)>>,
}

impl PixelScorer {
    pub fn new(det: &SequenceDetection, gt: &GroundTruth) -> Result<Self> {
        if gt.frame_count() != det.frame_count {
            return Err(Error::InvalidInput(format!(
                "{} detected frames against {} ground-truth frames",
                det.frame_count,
                gt.frame_count()
            )));
        }
        let grid = det.clips.first().map(|c| c.scores.grid);
        let truth = (0..det.frame_count)
            .map(|f| {
                if !gt.abnormal[f] {
                    return Ok(None);
                }
                let mask = gt.masks.get(f).and_then(Option::as_ref).ok_or(Error::MissingMask(f))?;
                if mask.count() == 0 {
                    return Err(Error::MissingMask(f));
                }
                if (mask.width(), mask.height()) != (det.width, det.height) {
                    return Err(Error::DimensionMismatch {
                        expected: (mask.width(), mask.height()),
                        found: (det.width, det.height),
                    });
                }
                let mut cells = vec![0u32; grid.map_or(0, |g| g.len())];
                if let Some(g) = grid {
                    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
                        if let Some(m) = g.patch_at(i % det.width, i / det.width) {
                            cells[m] += 1;
                        }
                    }
                }
                Ok(Some((cells, mask.count())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { truth })
    }

    pub fn counts_at(&self, det: &SequenceDetection, cfg: &DetectorConfig, t_p: f64) -> LevelCounts {
        let th = Thresholds::swept(cfg, t_p);
        let labels: Vec<Vec<Label>> = det.clips.iter().map(|c| c.scores.label(&th, cfg.combine)).collect();
        let mut c = LevelCounts::default();
        for (f, truth) in self.truth.iter().enumerate() {
            let l = labels.get(f / det.clip_len);
            match truth {
                Some((cells, total)) => {
                    let overlap: usize = l.map_or(0, |l| {
                        l.iter().zip(cells).filter(|(x, _)| x.is_detected()).map(|(_, &n)| n as usize).sum()
                    });
                    c.abnormal_frames += 1;
                    c.true_detections += overlap_suffices(overlap, *total) as usize;
                }
                None => {
                    c.normal_frames += 1;
                    c.false_detections += l.is_some_and(|l| l.iter().any(|x| x.is_detected())) as usize;
                }
            }
        }
        c
    }
}

/// Rebuilds a detection run from the output of
/// [`SequenceDetection::scores_csv`]. Offsets and eligibility are taken from
/// `model` and `cfg`, which should be the ones the scores were produced with.
pub fn parse_scores_csv(
    text: &str,
    model: &TemporalModel,
    cfg: &DetectorConfig,
    width: usize,
    height: usize,
    frame_count: usize,
) -> Result<SequenceDetection> {
    let grid = *model.grid();
    let clip_len = model.clip_len();
    let bad = |line: usize, what: &str| Error::InvalidInput(format!("scores line {line}: {what}"));
    let mut clips: Vec<DetectionGrid> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad(n, "expected 5 fields"));
        }
        let frame: usize = f[0].parse().map_err(|_| bad(n, "bad frame"))?;
        let m: usize = f[1].parse().map_err(|_| bad(n, "bad location"))?;
        let lt: f64 = f[2].parse().map_err(|_| bad(n, "bad L_temporal"))?;
        let ls: f64 = f[3].parse().map_err(|_| bad(n, "bad L_spatial"))?;
        let label = match f[4] {
            "normal" => Label::Normal,
            "seed" => Label::Seed,
            "grown" => Label::Grown,
            _ => return Err(bad(n, "bad label")),
        };
        let clip = frame / clip_len;
        if frame % clip_len != 0 || m >= grid.len() || clip > clips.len() || (frame + clip_len) > frame_count {
            return Err(bad(n, "row does not fit the model geometry"));
        }
        if clip == clips.len() {
            if clips.last().is_some_and(|c| c.labels.len() != grid.len()) {
                return Err(bad(n, "previous clip is incomplete"));
            }
            clips.push(DetectionGrid {
                clip_index: clip,
                scores: ClipScores {
                    grid,
                    temporal: Vec::new(),
                    spatial: Vec::new(),
                    offset: Vec::new(),
                    eligible: Vec::new(),
                },
                labels: Vec::new(),
            });
        }
        let c = &mut clips[clip];
        if m != c.labels.len() {
            return Err(bad(n, "locations out of order"));
        }
        c.scores.temporal.push(lt);
        c.scores.spatial.push(ls);
        c.scores.offset.push(if model.activity_rate(m) < cfg.activity_min { cfg.nonactive_offset } else { 0.0 });
        c.scores.eligible.push(!model.insufficient(m, cfg.k));
        c.labels.push(label);
    }
    if clips.last().is_some_and(|c| c.labels.len() != grid.len()) {
        return Err(Error::InvalidInput("scores end inside a clip".into()));
    }
    Ok(SequenceDetection { width, height, frame_count, clip_len, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_drop_the_remainder() {
        let flows = vec![FlowField::uniform(6, 6, 1.0, 0.0); 24];
        let clips = clip_trajectories(&flows, 10).unwrap();
        assert_eq!(clips.len(), 2);
        assert!(clips.iter().all(|c| c.len() == 10));
        assert!(clip_trajectories(&[], 10).is_err());
    }

    #[test]
    fn uncovered_frames_are_never_flagged() {
        let grid = PatchGrid::new(6, 6, 3, 3).unwrap();
        let layout = BinLayout::for_clip(4);
        let train = vec![FlowField::uniform(6, 6, 1.0, 0.0); 11];
        let model = train_sequences([train.as_slice()], grid, layout, 4).unwrap();
        let cfg = DetectorConfig { k: 2, ..Default::default() };
        let det = detect_sequence(&vec![FlowField::uniform(6, 6, 1.0, 0.0); 13], &model, &cfg).unwrap();
        assert_eq!(det.frame_count, 14);
        assert_eq!(det.clips.len(), 3);
        let scores = det.frame_scores(&cfg);
        assert!(scores[12..].iter().all(|s| s.is_infinite()));
        assert_eq!(det.frame_flags(), vec![false; 14]);
        assert_eq!(det.frame_masks().len(), 14);
        let csv = det.scores_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 4);
        assert_eq!(parse_scores_csv(&csv, &model, &cfg, 6, 6, 14).unwrap(), det);
        assert!(parse_scores_csv(&csv.replacen(",normal", ",bogus", 1), &model, &cfg, 6, 6, 14).is_err());
        let cut: String = csv.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(parse_scores_csv(&cut, &model, &cfg, 6, 6, 14).is_err());
    }

    #[test]
    fn training_needs_a_sequence() {
        let grid = PatchGrid::new(6, 6, 3, 3).unwrap();
        let none: [&[FlowField]; 0] = [];
        assert!(matches!(train_sequences(none, grid, BinLayout::for_clip(4), 4), Err(Error::EmptyTraining)));
    }
}
