//! Frame-, pixel- and event-level scoring plus ROC analysis.
//!
//! A frame is a true detection at frame level when anything in it is flagged.
//! At pixel level an abnormal frame only counts when the detection covers at
//! least 40% of its ground-truth pixels; normal frames are false positives as
//! soon as anything is flagged, at both levels.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow_io::Frame;

/// Minimum covered fraction of the ground-truth region, as `NUM / DEN`.
const PIXEL_RATIO_NUM: u64 = 2;
const PIXEL_RATIO_DEN: u64 = 5;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask {width}x{height} needs {} entries, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    /// Non-zero pixels are set.
    pub fn from_frame(frame: &Frame) -> Self {
        Self {
            width: frame.width(),
            height: frame.height(),
            bits: frame.intensity().iter().map(|&p| p != 0).collect(),
        }
    }

    /// Set pixels become 255, others 0.
    pub fn to_frame(&self) -> Frame {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        Frame::new(self.width, self.height, data).expect("mask dimensions are valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn set_rect(&mut self, x: usize, y: usize, w: usize, h: usize) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.bits[yy * self.width + xx] = true;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn overlap(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }
}

/// An annotated abnormal interval, frames `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Per-frame abnormal flag.
    pub abnormal: Vec<bool>,
    /// Per-frame anomaly region, where annotated.
    pub masks: Vec<Option<Mask>>,
    pub events: Vec<Event>,
}

impl GroundTruth {
    pub fn frame_count(&self) -> usize {
        self.abnormal.len()
    }

    pub fn has_masks(&self) -> bool {
        self.masks.iter().any(Option::is_some)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.masks.is_empty() && self.masks.len() != self.abnormal.len() {
            return Err(Error::InvalidInput("mask list length differs from frame count".into()));
        }
        let mut dims = None;
        for m in self.masks.iter().flatten() {
            let d = (m.width, m.height);
            if *dims.get_or_insert(d) != d {
                return Err(Error::InvalidInput("ground-truth masks differ in size".into()));
            }
        }
        for (i, a) in self.events.iter().enumerate() {
            if a.start > a.end {
                return Err(Error::InvalidInput(format!("event {i} ends before it starts")));
            }
            for b in &self.events[i + 1..] {
                if a.label == b.label && a.start <= b.end && b.start <= a.end {
                    return Err(Error::InvalidInput(format!("overlapping '{}' events", a.label)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub tpr: f64,
    pub fpr: f64,
}

/// Raw tallies behind a `(TPR, FPR)` pair; sums across sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LevelCounts {
    pub true_detections: usize,
    pub abnormal_frames: usize,
    pub false_detections: usize,
    pub normal_frames: usize,
}

impl LevelCounts {
    pub fn rates(&self) -> Result<Rates> {
        if self.abnormal_frames == 0 {
            return Err(Error::NoAbnormalFrames);
        }
        if self.normal_frames == 0 {
            return Err(Error::NoNormalFrames);
        }
        Ok(Rates {
            tpr: self.true_detections as f64 / self.abnormal_frames as f64,
            fpr: self.false_detections as f64 / self.normal_frames as f64,
        })
    }
}

impl std::ops::AddAssign for LevelCounts {
    fn add_assign(&mut self, o: Self) {
        self.true_detections += o.true_detections;
        self.abnormal_frames += o.abnormal_frames;
        self.false_detections += o.false_detections;
        self.normal_frames += o.normal_frames;
    }
}

fn check_len(n: usize, gt: &GroundTruth) -> Result<()> {
    if n != gt.frame_count() {
        return Err(Error::InvalidInput(format!(
            "{n} detected frames against {} ground-truth frames",
            gt.frame_count()
        )));
    }
    Ok(())
}

pub fn frame_counts(flags: &[bool], gt: &GroundTruth) -> Result<LevelCounts> {
    check_len(flags.len(), gt)?;
    let mut c = LevelCounts::default();
    for (&f, &a) in flags.iter().zip(&gt.abnormal) {
        if a {
            c.abnormal_frames += 1;
            c.true_detections += f as usize;
        } else {
            c.normal_frames += 1;
            c.false_detections += f as usize;
        }
    }
    Ok(c)
}

/// Whether `detected` covers at least 40% of `truth`.
pub fn covers_enough(detected: &Mask, truth: &Mask) -> bool {
    overlap_suffices(detected.overlap(truth), truth.count())
}

/// The 40% rule on raw counts: `overlap` of `truth` ground-truth pixels.
pub fn overlap_suffices(overlap: usize, truth: usize) -> bool {
    truth > 0 && overlap as u64 * PIXEL_RATIO_DEN >= truth as u64 * PIXEL_RATIO_NUM
}

pub fn pixel_counts(detected: &[Mask], gt: &GroundTruth) -> Result<LevelCounts> {
    check_len(detected.len(), gt)?;
    let mut c = LevelCounts::default();
    for (f, (det, &a)) in detected.iter().zip(&gt.abnormal).enumerate() {
        if a {
            let truth = gt.masks.get(f).and_then(Option::as_ref).ok_or(Error::MissingMask(f))?;
            if truth.count() == 0 {
                return Err(Error::MissingMask(f));
            }
            if (truth.width, truth.height) != (det.width, det.height) {
                return Err(Error::DimensionMismatch {
                    expected: (truth.width, truth.height),
                    found: (det.width, det.height),
                });
            }
            c.abnormal_frames += 1;
            c.true_detections += covers_enough(det, truth) as usize;
        } else {
            c.normal_frames += 1;
            c.false_detections += det.any() as usize;
        }
    }
    Ok(c)
}

pub fn frame_level(flags: &[bool], gt: &GroundTruth) -> Result<Rates> {
    frame_counts(flags, gt)?.rates()
}

pub fn pixel_level(detected: &[Mask], gt: &GroundTruth) -> Result<Rates> {
    pixel_counts(detected, gt)?.rates()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventOutcome {
    pub event_id: usize,
    pub hit: bool,
    pub first_detected_frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventReport {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub events: Vec<EventOutcome>,
}

/// Maximal runs of flagged frames, merged when at most `merge_gap` unflagged
/// frames separate them. Intervals are inclusive.
pub fn detected_events(flags: &[bool], merge_gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (f, _) in flags.iter().enumerate().filter(|(_, &x)| x) {
        match out.last_mut() {
            Some((_, end)) if f - *end - 1 <= merge_gap => *end = f,
            _ => out.push((f, f)),
        }
    }
    out
}

/// Event-level hits, misses and false alarms.
///
/// A ground-truth event is hit when some frame inside it is flagged and, when
/// both a detection mask and a ground-truth mask exist for that frame, the
/// two overlap. A merged detection touching no ground-truth event is a false alarm.
pub fn event_level(flags: &[bool], detected: Option<&[Mask]>, gt: &GroundTruth, merge_gap: usize) -> Result<EventReport> {
    check_len(flags.len(), gt)?;
    if let Some(d) = detected {
        check_len(d.len(), gt)?;
    }
    let mut report = EventReport::default();
    for (event_id, ev) in gt.events.iter().enumerate() {
        let last = ev.end.min(flags.len().saturating_sub(1));
        let first = (ev.start..=last).filter(|&f| f < flags.len()).find(|&f| {
            flags[f]
                && match (detected.map(|d| &d[f]), gt.masks.get(f).and_then(Option::as_ref)) {
                    (Some(det), Some(truth)) => det.overlap(truth) > 0,
                    _ => true,
                }
        });
        if first.is_some() {
            report.hits += 1;
        } else {
            report.misses += 1;
        }
        report.events.push(EventOutcome { event_id, hit: first.is_some(), first_detected_frame: first });
    }
    report.false_alarms = detected_events(flags, merge_gap)
        .into_iter()
        .filter(|&(s, e)| !gt.events.iter().any(|ev| s <= ev.end && ev.start <= e))
        .count();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// One point per swept threshold, in sweep order.
    pub swept: Vec<RocPoint>,
    /// `(fpr, tpr)` sorted, with `(0,0)` and `(1,1)` added.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub eer: f64,
}

impl RocCurve {
    /// Builds the curve from per-threshold rates.
    pub fn from_points(swept: Vec<RocPoint>) -> Result<Self> {
        if swept.len() < 2 {
            return Err(Error::InvalidInput("an ROC sweep needs at least two thresholds".into()));
        }
        let mut points: Vec<(f64, f64)> = swept.iter().map(|p| (p.fpr, p.tpr)).collect();
        points.push((0.0, 0.0));
        points.push((1.0, 1.0));
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        points.dedup();
        let auc = points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum();
        let eer = equal_error_rate(&points);
        Ok(Self { swept, points, auc, eer })
    }
}

/// FPR where the curve crosses `FPR = 1 - TPR`, linearly interpolated.
fn equal_error_rate(points: &[(f64, f64)]) -> f64 {
    let gap = |p: &(f64, f64)| p.0 + p.1 - 1.0;
    for w in points.windows(2) {
        let (g0, g1) = (gap(&w[0]), gap(&w[1]));
        if g0 <= 0.0 && g1 >= 0.0 {
            if g1 == g0 {
                return w[0].0;
            }
            let t = -g0 / (g1 - g0);
            return w[0].0 + t * (w[1].0 - w[0].0);
        }
    }
    // unreachable for curves running from (0,0) to (1,1)
    0.5
}

/// Frame-level ROC: frame `f` is flagged at threshold `t` iff `scores[f] < t`.
pub fn roc(scores: &[f64], gt: &GroundTruth, thresholds: &[f64]) -> Result<RocCurve> {
    check_len(scores.len(), gt)?;
    if scores.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::DegenerateScores);
    }
    if thresholds.len() < 2 {
        return Err(Error::InvalidInput("an ROC sweep needs at least two thresholds".into()));
    }
    let swept = thresholds
        .iter()
        .map(|&t| {
            let flags: Vec<bool> = scores.iter().map(|&s| s < t).collect();
            let r = frame_level(&flags, gt)?;
            Ok(RocPoint { threshold: t, fpr: r.fpr, tpr: r.tpr })
        })
        .collect::<Result<Vec<_>>>()?;
    RocCurve::from_points(swept)
}

/// ROC from tallies already accumulated per threshold, e.g. summed over
/// several sequences.
pub fn roc_from_counts(counts: &[(f64, LevelCounts)]) -> Result<RocCurve> {
    let swept = counts
        .iter()
        .map(|(t, c)| {
            let r = c.rates()?;
            Ok(RocPoint { threshold: *t, fpr: r.fpr, tpr: r.tpr })
        })
        .collect::<Result<Vec<_>>>()?;
    RocCurve::from_points(swept)
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `threshold,level,TPR,FPR` rows, a blank line, then `level,AUC,EER` rows.
pub fn roc_csv(curves: &[(&str, &RocCurve)]) -> String {
    let mut out = String::from("threshold,level,TPR,FPR\n");
    for (level, c) in curves {
        for p in &c.swept {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", p.threshold, level, p.tpr, p.fpr);
        }
    }
    out.push_str("\nlevel,AUC,EER\n");
    for (level, c) in curves {
        let _ = writeln!(out, "{},{:.6},{:.6}", level, c.auc, c.eer);
    }
    out
}

pub fn events_csv(report: &EventReport) -> String {
    let mut out = String::from("event_id,hit,first_detected_frame\n");
    for e in &report.events {
        let first = e.first_detected_frame.map(|f| f.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", e.event_id, e.hit as u8, first);
    }
    out
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split(',').map(str::trim).collect()))
}

/// Parses `frame_index,label` lines (label 0 or 1) into per-frame flags.
/// A non-numeric first line is taken as a header.
pub fn parse_labels(text: &str, frame_count: usize) -> Result<Vec<bool>> {
    let mut out = vec![false; frame_count];
    let mut seen = vec![false; frame_count];
    for (n, (line, fields)) in data_lines(text).enumerate() {
        if n == 0 && fields[0].parse::<usize>().is_err() {
            continue;
        }
        let bad = || Error::InvalidInput(format!("labels line {line}: expected frame_index,label"));
        if fields.len() != 2 {
            return Err(bad());
        }
        let f: usize = fields[0].parse().map_err(|_| bad())?;
        let abnormal = match fields[1] {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        if f >= frame_count {
            return Err(Error::InvalidInput(format!("labels line {line}: frame {f} out of range")));
        }
        out[f] = abnormal;
        seen[f] = true;
    }
    if let Some(f) = seen.iter().position(|&s| !s) {
        return Err(Error::InvalidInput(format!("labels file has no entry for frame {f}")));
    }
    Ok(out)
}

pub fn labels_to_string(abnormal: &[bool]) -> String {
    let mut out = String::from("frame_index,label\n");
    for (f, &a) in abnormal.iter().enumerate() {
        let _ = writeln!(out, "{f},{}", a as u8);
    }
    out
}

/// Parses `start,end,label` lines (inclusive frame bounds).
pub fn parse_events(text: &str) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for (n, (line, fields)) in data_lines(text).enumerate() {
        if n == 0 && fields[0].parse::<usize>().is_err() {
            continue;
        }
        let bad = || Error::InvalidInput(format!("events line {line}: expected start,end,label"));
        if fields.len() != 3 {
            return Err(bad());
        }
        let start = fields[0].parse().map_err(|_| bad())?;
        let end = fields[1].parse().map_err(|_| bad())?;
        out.push(Event { start, end, label: fields[2].to_string() });
    }
    Ok(out)
}

pub fn events_to_string(events: &[Event]) -> String {
    let mut out = String::from("start,end,label\n");
    for e in events {
        let _ = writeln!(out, "{},{},{}", e.start, e.end, e.label);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt_frames(abnormal: Vec<bool>) -> GroundTruth {
        GroundTruth { abnormal, ..Default::default() }
    }

    #[test]
    fn frame_level_rates() {
        let mut abnormal = vec![true; 10];
        abnormal.extend(vec![false; 10]);
        let gt = gt_frames(abnormal);
        let mut flags = vec![false; 20];
        flags[..8].fill(true);
        let r = frame_level(&flags, &gt).unwrap();
        assert!((r.tpr - 0.8).abs() < 1e-15);
        assert_eq!(r.fpr, 0.0);
        assert_eq!(frame_level(&vec![false; 20], &gt).unwrap(), Rates { tpr: 0.0, fpr: 0.0 });
        assert_eq!(frame_level(&vec![true; 20], &gt).unwrap(), Rates { tpr: 1.0, fpr: 1.0 });
        assert!(matches!(frame_level(&[true], &gt_frames(vec![false])), Err(Error::NoAbnormalFrames)));
        assert!(matches!(frame_level(&[true], &gt_frames(vec![true])), Err(Error::NoNormalFrames)));
    }

    #[test]
    fn pixel_rule_boundary() {
        let mut truth = Mask::empty(10, 10);
        truth.set_rect(0, 0, 10, 10);
        let mut det = Mask::empty(10, 10);
        det.set_rect(0, 0, 10, 4);
        assert!(covers_enough(&det, &truth));
        let mut short = Mask::empty(10, 10);
        short.set_rect(0, 0, 10, 3);
        short.set_rect(0, 3, 9, 1);
        assert_eq!(short.overlap(&truth), 39);
        assert!(!covers_enough(&short, &truth));
    }

    #[test]
    fn pixel_level_counts_full_frame_flags() {
        let mut truth = Mask::empty(4, 4);
        truth.set_rect(0, 0, 2, 2);
        let gt = GroundTruth {
            abnormal: vec![true, false],
            masks: vec![Some(truth), None],
            events: vec![],
        };
        let mut full = Mask::empty(4, 4);
        full.set_rect(0, 0, 4, 4);
        let r = pixel_level(&[full.clone(), full.clone()], &gt).unwrap();
        assert_eq!(r, Rates { tpr: 1.0, fpr: 1.0 });
        let no_mask = GroundTruth { masks: vec![None, None], ..gt };
        assert!(matches!(pixel_level(&[full.clone(), full], &no_mask), Err(Error::MissingMask(0))));
    }

    #[test]
    fn events_merge_and_false_alarms() {
        let gt = GroundTruth {
            abnormal: vec![false; 60],
            masks: vec![],
            events: vec![Event { start: 10, end: 30, label: "bike".into() }],
        };
        let mut flags = vec![false; 60];
        flags[12..15].fill(true);
        flags[20..25].fill(true);
        assert_eq!(detected_events(&flags, 10), vec![(12, 24)]);
        assert_eq!(detected_events(&flags, 4), vec![(12, 14), (20, 24)]);
        flags[45..50].fill(true);
        let r = event_level(&flags, None, &gt, 10).unwrap();
        assert_eq!((r.hits, r.misses, r.false_alarms), (1, 0, 1));
        assert_eq!(r.events[0].first_detected_frame, Some(12));
    }

    #[test]
    fn event_hit_requires_spatial_overlap_when_masks_exist() {
        let mut truth = Mask::empty(4, 4);
        truth.set_rect(0, 0, 2, 2);
        let gt = GroundTruth {
            abnormal: vec![true],
            masks: vec![Some(truth)],
            events: vec![Event { start: 0, end: 0, label: "x".into() }],
        };
        let mut elsewhere = Mask::empty(4, 4);
        elsewhere.set_rect(3, 3, 1, 1);
        let r = event_level(&[true], Some(&[elsewhere]), &gt, 0).unwrap();
        assert_eq!((r.hits, r.misses), (0, 1));
    }

    #[test]
    fn perfect_separation() {
        let gt = gt_frames(vec![true, true, false, false]);
        let c = roc(&[-100.0, -90.0, -1.0, -2.0], &gt, &linspace(-120.0, 0.0, 13)).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.eer, 0.0);
        assert!(matches!(roc(&[1.0; 4], &gt, &[0.0, 2.0]), Err(Error::DegenerateScores)));
    }

    #[test]
    fn text_formats() {
        let labels = labels_to_string(&[false, true, true]);
        assert_eq!(parse_labels(&labels, 3).unwrap(), vec![false, true, true]);
        assert!(parse_labels("0,1\n", 2).is_err());
        let events = vec![Event { start: 3, end: 9, label: "cart".into() }];
        assert_eq!(parse_events(&events_to_string(&events)).unwrap(), events);
        assert!(parse_events("1,2\n").is_err());
    }

    #[test]
    fn overlapping_events_rejected() {
        let gt = GroundTruth {
            abnormal: vec![false; 10],
            masks: vec![],
            events: vec![
                Event { start: 0, end: 5, label: "a".into() },
                Event { start: 5, end: 8, label: "a".into() },
            ],
        };
        assert!(gt.validate().is_err());
    }
}
