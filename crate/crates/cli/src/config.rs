//! Run configuration: one `[section]` / `key = value` file holding every
//! tunable of a run. Unknown sections and keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use stam_core::descriptor::{BinLayout, PatchGrid};
use stam_core::detector::{Combine, DetectorConfig, SpatialSource};
use stam_core::flow_io::FlowEstimatorConfig;
use stam_core::keyvalue::{self, Section};
use stam_core::knn_stat::TailMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowSource {
    /// Read `<seq>/flow/*.flo`.
    Precomputed,
    /// Estimate from `<seq>/frames/*.pgm` on the fly.
    Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorParams {
    pub patch_w: usize,
    pub patch_h: usize,
    pub clip_len: usize,
    pub mag_bins: usize,
    pub ang_bins: usize,
    /// `None` means `clip_len - 1`.
    pub r_max: Option<f64>,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self { patch_w: 3, patch_h: 3, clip_len: 10, mag_bins: 8, ang_bins: 8, r_max: None }
    }
}

impl DescriptorParams {
    pub fn layout(&self) -> Result<BinLayout> {
        let r_max = self.r_max.unwrap_or((self.clip_len - 1) as f64);
        Ok(BinLayout::new(self.mag_bins, self.ang_bins, r_max)?)
    }

    pub fn grid(&self, width: usize, height: usize) -> Result<PatchGrid> {
        Ok(PatchGrid::new(width, height, self.patch_w, self.patch_h)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub model: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { train: Vec::new(), test: Vec::new(), model: "model.stam".into(), output: "output".into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    /// `None` picks the range from the observed scores.
    pub sweep_lo: Option<f64>,
    pub sweep_hi: Option<f64>,
    pub sweep_steps: usize,
    pub merge_gap: usize,
    pub k_list: Vec<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { sweep_lo: None, sweep_hi: None, sweep_steps: 200, merge_gap: 10, k_list: vec![15, 30, 50, 70] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub descriptor: DescriptorParams,
    pub detector: DetectorConfig,
    pub flow_source: FlowSource,
    pub estimator: FlowEstimatorConfig,
    pub paths: Paths,
    pub eval: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            descriptor: DescriptorParams::default(),
            detector: DetectorConfig::default(),
            flow_source: FlowSource::Precomputed,
            estimator: FlowEstimatorConfig::default(),
            paths: Paths::default(),
            eval: EvalParams::default(),
        }
    }
}

const DESCRIPTOR_KEYS: &[&str] = &["patch_w", "patch_h", "clip_len", "mag_bins", "ang_bins", "r_max"];
const DETECTOR_KEYS: &[&str] = &[
    "k",
    "t_low_temporal",
    "t_low_spatial",
    "t_high_temporal",
    "t_high_spatial",
    "spatial_radius",
    "activity_min",
    "nonactive_offset",
    "combine",
    "motion_floor",
    "spatial_source",
    "p_min",
    "sigma2_min",
    "tail",
];
const FLOW_KEYS: &[&str] = &["source", "iterations", "alpha", "clamp"];
const PATH_KEYS: &[&str] = &["train", "test", "model", "output"];
const EVAL_KEYS: &[&str] = &["sweep_lo", "sweep_hi", "sweep_steps", "merge_gap", "k_list"];

fn set<T: std::str::FromStr>(s: &Section, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = s.parse(key)? {
        *slot = v;
    }
    Ok(())
}

fn auto_or_number(s: &Section, key: &str) -> Result<Option<Option<f64>>> {
    match s.get(key) {
        None => Ok(None),
        Some(e) if e.value == "auto" => Ok(Some(None)),
        Some(_) => Ok(Some(s.parse::<f64>(key)?)),
    }
}

fn word<'a>(s: &'a Section, key: &str) -> Option<&'a str> {
    s.get(key).map(|e| e.value.as_str())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for s in keyvalue::parse(text)? {
            let name = s.name.as_str();
            if name.is_empty() {
                bail!("line {}: keys must sit inside a [section]", s.entries[0].line);
            }
            if seen.iter().any(|n| n == name) {
                bail!("line {}: section [{name}] appears twice", s.line);
            }
            match name {
                "descriptor" => {
                    s.check_keys(DESCRIPTOR_KEYS)?;
                    let d = &mut cfg.descriptor;
                    set(&s, "patch_w", &mut d.patch_w)?;
                    set(&s, "patch_h", &mut d.patch_h)?;
                    set(&s, "clip_len", &mut d.clip_len)?;
                    set(&s, "mag_bins", &mut d.mag_bins)?;
                    set(&s, "ang_bins", &mut d.ang_bins)?;
                    if let Some(r) = auto_or_number(&s, "r_max")? {
                        d.r_max = r;
                    }
                }
                "detector" => {
                    s.check_keys(DETECTOR_KEYS)?;
                    let d = &mut cfg.detector;
                    set(&s, "k", &mut d.k)?;
                    set(&s, "t_low_temporal", &mut d.t_low_temporal)?;
                    set(&s, "t_low_spatial", &mut d.t_low_spatial)?;
                    set(&s, "t_high_temporal", &mut d.t_high_temporal)?;
                    set(&s, "t_high_spatial", &mut d.t_high_spatial)?;
                    set(&s, "spatial_radius", &mut d.spatial_radius)?;
                    set(&s, "activity_min", &mut d.activity_min)?;
                    set(&s, "nonactive_offset", &mut d.nonactive_offset)?;
                    set(&s, "motion_floor", &mut d.motion_floor)?;
                    set(&s, "p_min", &mut d.scoring.p_min)?;
                    set(&s, "sigma2_min", &mut d.scoring.sigma2_min)?;
                    d.combine = match word(&s, "combine") {
                        None => d.combine,
                        Some("or") => Combine::Or,
                        Some("and") => Combine::And,
                        Some(o) => bail!("combine must be 'or' or 'and', got '{o}'"),
                    };
                    d.spatial_source = match word(&s, "spatial_source") {
                        None => d.spatial_source,
                        Some("same_clip") => SpatialSource::SameClip,
                        Some("training_history") => SpatialSource::TrainingHistory,
                        Some(o) => bail!("spatial_source must be 'same_clip' or 'training_history', got '{o}'"),
                    };
                    d.scoring.tail = match word(&s, "tail") {
                        None => d.scoring.tail,
                        Some("upper") => TailMode::Upper,
                        Some("two_sided") => TailMode::TwoSided,
                        Some(o) => bail!("tail must be 'upper' or 'two_sided', got '{o}'"),
                    };
                }
                "flow" => {
                    s.check_keys(FLOW_KEYS)?;
                    cfg.flow_source = match word(&s, "source") {
                        None => cfg.flow_source,
                        Some("precomputed") => FlowSource::Precomputed,
                        Some("estimate") => FlowSource::Estimate,
                        Some(o) => bail!("flow source must be 'precomputed' or 'estimate', got '{o}'"),
                    };
                    set(&s, "iterations", &mut cfg.estimator.iterations)?;
                    set(&s, "alpha", &mut cfg.estimator.alpha)?;
                    set(&s, "clamp", &mut cfg.estimator.clamp)?;
                }
                "paths" => {
                    s.check_keys(PATH_KEYS)?;
                    let p = &mut cfg.paths;
                    if let Some(e) = s.get("train") {
                        p.train = keyvalue::split_list(&e.value).map(PathBuf::from).collect();
                    }
                    if let Some(e) = s.get("test") {
                        p.test = keyvalue::split_list(&e.value).map(PathBuf::from).collect();
                    }
                    set(&s, "model", &mut p.model)?;
                    set(&s, "output", &mut p.output)?;
                }
                "eval" => {
                    s.check_keys(EVAL_KEYS)?;
                    let e = &mut cfg.eval;
                    if let Some(v) = auto_or_number(&s, "sweep_lo")? {
                        e.sweep_lo = v;
                    }
                    if let Some(v) = auto_or_number(&s, "sweep_hi")? {
                        e.sweep_hi = v;
                    }
                    set(&s, "sweep_steps", &mut e.sweep_steps)?;
                    set(&s, "merge_gap", &mut e.merge_gap)?;
                    if let Some(k) = s.parse_list("k_list")? {
                        e.k_list = k;
                    }
                }
                other => bail!("line {}: unknown section [{other}]", s.line),
            }
            seen.push(s.name.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.descriptor;
        if d.patch_w == 0 || d.patch_h == 0 {
            bail!("patch size must be positive");
        }
        if d.clip_len < 2 {
            bail!("clip_len must be >= 2");
        }
        self.descriptor.layout()?;
        self.detector.validate()?;
        let e = &self.estimator;
        if e.iterations == 0 || !(e.alpha > 0.0) || !(e.clamp > 0.0) {
            bail!("flow iterations, alpha and clamp must be positive");
        }
        let ev = &self.eval;
        if ev.sweep_steps < 2 {
            bail!("sweep_steps must be >= 2");
        }
        if let (Some(lo), Some(hi)) = (ev.sweep_lo, ev.sweep_hi) {
            if !(lo < hi) {
                bail!("sweep_lo must be below sweep_hi");
            }
        }
        if ev.k_list.iter().any(|&k| k < 2) {
            bail!("every K in k_list must be >= 2");
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let d = &self.descriptor;
        let t = &self.detector;
        let auto = |v: Option<f64>| v.map_or("auto".to_string(), |x| format!("{x:?}"));
        let list = |p: &[PathBuf]| p.iter().map(|x| x.display().to_string()).collect::<Vec<_>>().join(", ");
        keyvalue::render(&[
            (
                "descriptor",
                vec![
                    ("patch_w", d.patch_w.to_string()),
                    ("patch_h", d.patch_h.to_string()),
                    ("clip_len", d.clip_len.to_string()),
                    ("mag_bins", d.mag_bins.to_string()),
                    ("ang_bins", d.ang_bins.to_string()),
                    ("r_max", auto(d.r_max)),
                ],
            ),
            (
                "detector",
                vec![
                    ("k", t.k.to_string()),
                    ("t_low_temporal", format!("{:?}", t.t_low_temporal)),
                    ("t_low_spatial", format!("{:?}", t.t_low_spatial)),
                    ("t_high_temporal", format!("{:?}", t.t_high_temporal)),
                    ("t_high_spatial", format!("{:?}", t.t_high_spatial)),
                    ("spatial_radius", t.spatial_radius.to_string()),
                    ("activity_min", format!("{:?}", t.activity_min)),
                    ("nonactive_offset", format!("{:?}", t.nonactive_offset)),
                    ("combine", if t.combine == Combine::Or { "or" } else { "and" }.into()),
                    ("motion_floor", format!("{:?}", t.motion_floor)),
                    (
                        "spatial_source",
                        match t.spatial_source {
                            SpatialSource::SameClip => "same_clip",
                            SpatialSource::TrainingHistory => "training_history",
                        }
                        .into(),
                    ),
                    ("p_min", format!("{:?}", t.scoring.p_min)),
                    ("sigma2_min", format!("{:?}", t.scoring.sigma2_min)),
                    ("tail", if t.scoring.tail == TailMode::Upper { "upper" } else { "two_sided" }.into()),
                ],
            ),
            (
                "flow",
                vec![
                    (
                        "source",
                        if self.flow_source == FlowSource::Precomputed { "precomputed" } else { "estimate" }.into(),
                    ),
                    ("iterations", self.estimator.iterations.to_string()),
                    ("alpha", format!("{:?}", self.estimator.alpha)),
                    ("clamp", format!("{:?}", self.estimator.clamp)),
                ],
            ),
            (
                "paths",
                vec![
                    ("train", list(&self.paths.train)),
                    ("test", list(&self.paths.test)),
                    ("model", self.paths.model.display().to_string()),
                    ("output", self.paths.output.display().to_string()),
                ],
            ),
            (
                "eval",
                vec![
                    ("sweep_lo", auto(self.eval.sweep_lo)),
                    ("sweep_hi", auto(self.eval.sweep_hi)),
                    ("sweep_steps", self.eval.sweep_steps.to_string()),
                    ("merge_gap", self.eval.merge_gap.to_string()),
                    (
                        "k_list",
                        self.eval.k_list.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "),
                    ),
                ],
            ),
        ])
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.train.iter_mut().for_each(fix);
        self.test.iter_mut().for_each(fix);
        fix(&mut self.model);
        fix(&mut self.output);
    }
}
