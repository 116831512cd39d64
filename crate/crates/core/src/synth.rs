//! Seeded synthetic crowd flow with injected anomalies and exact ground truth.
//!
//! Flow `t` (frame `t` to `t + 1`) is built as:
//!
//! 1. zero everywhere, then each `[background]` region's drift, later regions
//!    overriding earlier ones;
//! 2. anomaly rectangles active at `t` overwrite their area with their own flow;
//! 3. with a perspective ramp, both are multiplied by
//!    `top + (bottom - top) * y / (H - 1)` at row `y`;
//! 4. independent uniform noise in `[-a, a]` is added to `u` and `v` of every pixel.
//!
//! Noise comes from xorshift64* (shifts 12, 25, 27; multiplier
//! `0x2545F4914F6CDD1D`) seeded per frame with
//! `splitmix64(seed + frame * 0x9E3779B97F4A7C15)`. A draw maps to
//! `a * (2 * (x >> 11) / 2^53 - 1)`, taken as `u` then `v` for each pixel in
//! row-major order. This fixes the output bit-for-bit for a given spec.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{Event, GroundTruth, Mask};
use crate::flow_io::FlowField;
use crate::keyvalue::{self, Section};

/// 64-bit xorshift* generator.
#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        Self { state: if seed == 0 { 0x9E37_79B9_7F4A_7C15 } else { seed } }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn frame_rng(seed: u64, frame: usize) -> XorShift64Star {
    XorShift64Star::new(splitmix64(seed.wrapping_add((frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// A region of uniform crowd drift.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftRegion {
    pub rect: Rect,
    pub flow: (f32, f32),
}

/// A rectangle whose flow is replaced during frames `start_frame..=end_frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct Anomaly {
    pub label: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub rect: Rect,
    pub flow: (f32, f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub seed: u64,
    /// Noise amplitude `a`, pixels per frame.
    pub noise: f32,
    /// Speed multiplier at the top and bottom rows.
    pub perspective: Option<(f32, f32)>,
    pub background: Vec<DriftRegion>,
    pub anomalies: Vec<Anomaly>,
    /// Number of anomaly-free training sequences to emit alongside the scene.
    pub training_sequences: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty frame {}x{}", self.width, self.height));
        }
        if self.frame_count < 2 {
            return bad("a scene needs at least 2 frames".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise amplitude must be >= 0, got {}", self.noise));
        }
        if let Some((a, b)) = self.perspective {
            if !(a.is_finite() && b.is_finite()) {
                return bad("perspective scales must be finite".into());
            }
        }
        for r in &self.background {
            if !r.rect.fits(self.width, self.height) {
                return bad(format!("background rect {:?} outside the frame", r.rect));
            }
            if !(r.flow.0.is_finite() && r.flow.1.is_finite()) {
                return bad("background flow must be finite".into());
            }
        }
        for (i, a) in self.anomalies.iter().enumerate() {
            if !a.rect.fits(self.width, self.height) {
                return bad(format!("anomaly '{}' rect {:?} outside the frame", a.label, a.rect));
            }
            if a.start_frame > a.end_frame || a.end_frame >= self.frame_count {
                return bad(format!("anomaly '{}' frames {}..={} outside the sequence", a.label, a.start_frame, a.end_frame));
            }
            if !(a.flow.0.is_finite() && a.flow.1.is_finite()) {
                return bad("anomaly flow must be finite".into());
            }
            for b in &self.anomalies[i + 1..] {
                if a.label == b.label && a.start_frame <= b.end_frame && b.start_frame <= a.end_frame {
                    return bad(format!("anomalies labelled '{}' overlap in time", a.label));
                }
            }
        }
        Ok(())
    }

    /// The same scene without anomalies, noise drawn from `seed`.
    pub fn normal_variant(&self, seed: u64) -> Self {
        Self { seed, anomalies: Vec::new(), training_sequences: 0, ..self.clone() }
    }

    /// Seeds of the training variants: `seed + 1 ..= seed + training_sequences`.
    pub fn training_variants(&self) -> Vec<SceneSpec> {
        (1..=self.training_sequences as u64)
            .map(|i| self.normal_variant(self.seed.wrapping_add(i)))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let sections = keyvalue::parse(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        from_sections(&sections).map_err(|e| match e {
            Error::InvalidSpec(_) => e,
            other => Error::InvalidSpec(other.to_string()),
        })
    }

    pub fn to_text(&self) -> String {
        let pair = |a: f32, b: f32| format!("{a}, {b}");
        let rect = |r: &Rect| format!("{}, {}, {}, {}", r.x, r.y, r.w, r.h);
        let mut scene = vec![
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("frames", self.frame_count.to_string()),
            ("seed", self.seed.to_string()),
            ("noise", self.noise.to_string()),
        ];
        if let Some((a, b)) = self.perspective {
            scene.push(("perspective", pair(a, b)));
        }
        scene.push(("training_sequences", self.training_sequences.to_string()));
        let mut sections = vec![("scene", scene)];
        for r in &self.background {
            sections.push(("background", vec![("rect", rect(&r.rect)), ("flow", pair(r.flow.0, r.flow.1))]));
        }
        for a in &self.anomalies {
            sections.push((
                "anomaly",
                vec![
                    ("label", a.label.clone()),
                    ("frames", format!("{}, {}", a.start_frame, a.end_frame)),
                    ("rect", rect(&a.rect)),
                    ("flow", pair(a.flow.0, a.flow.1)),
                ],
            ));
        }
        keyvalue::render(&sections)
    }
}

fn require<T: std::str::FromStr>(s: &Section, key: &str) -> Result<T> {
    s.parse(key)?
        .ok_or_else(|| Error::InvalidSpec(format!("[{}] at line {} is missing '{key}'", s.name, s.line)))
}

fn fixed_list<T: std::str::FromStr + Copy, const N: usize>(s: &Section, key: &str) -> Result<[T; N]> {
    let v: Vec<T> = s
        .parse_list(key)?
        .ok_or_else(|| Error::InvalidSpec(format!("[{}] at line {} is missing '{key}'", s.name, s.line)))?;
    v.try_into()
        .map_err(|_| Error::InvalidSpec(format!("[{}] '{key}' needs {N} comma-separated values", s.name)))
}

fn parse_rect(s: &Section) -> Result<Rect> {
    let [x, y, w, h] = fixed_list::<usize, 4>(s, "rect")?;
    Ok(Rect { x, y, w, h })
}

fn from_sections(sections: &[Section]) -> Result<SceneSpec> {
    let mut scene = None;
    let mut background = Vec::new();
    let mut anomalies = Vec::new();
    for s in sections {
        match s.name.as_str() {
            "scene" => {
                if scene.is_some() {
                    return Err(Error::InvalidSpec(format!("line {}: duplicate [scene]", s.line)));
                }
                s.check_keys(&["width", "height", "frames", "seed", "noise", "perspective", "training_sequences"])?;
                let perspective = match s.get("perspective") {
                    Some(_) => {
                        let [a, b] = fixed_list::<f32, 2>(s, "perspective")?;
                        Some((a, b))
                    }
                    None => None,
                };
                scene = Some(SceneSpec {
                    width: require(s, "width")?,
                    height: require(s, "height")?,
                    frame_count: require(s, "frames")?,
                    seed: require(s, "seed")?,
                    noise: s.parse("noise")?.unwrap_or(0.0),
                    perspective,
                    background: Vec::new(),
                    anomalies: Vec::new(),
                    training_sequences: s.parse("training_sequences")?.unwrap_or(0),
                });
            }
            "background" => {
                s.check_keys(&["rect", "flow"])?;
                let [u, v] = fixed_list::<f32, 2>(s, "flow")?;
                background.push(DriftRegion { rect: parse_rect(s)?, flow: (u, v) });
            }
            "anomaly" => {
                s.check_keys(&["label", "frames", "rect", "flow"])?;
                let [start_frame, end_frame] = fixed_list::<usize, 2>(s, "frames")?;
                let [u, v] = fixed_list::<f32, 2>(s, "flow")?;
                anomalies.push(Anomaly {
                    label: s.get("label").map_or_else(|| "anomaly".to_string(), |e| e.value.clone()),
                    start_frame,
                    end_frame,
                    rect: parse_rect(s)?,
                    flow: (u, v),
                });
            }
            other => return Err(Error::InvalidSpec(format!("line {}: unknown section [{other}]", s.line))),
        }
    }
    let mut spec = scene.ok_or_else(|| Error::InvalidSpec("missing [scene] section".into()))?;
    spec.background = background;
    spec.anomalies = anomalies;
    spec.validate()?;
    Ok(spec)
}

fn flow_at(spec: &SceneSpec, frame: usize, x: usize, y: usize) -> (f32, f32) {
    let mut f = spec
        .background
        .iter()
        .rev()
        .find(|r| r.rect.contains(x, y))
        .map_or((0.0, 0.0), |r| r.flow);
    if let Some(a) = spec
        .anomalies
        .iter()
        .rev()
        .find(|a| a.start_frame <= frame && frame <= a.end_frame && a.rect.contains(x, y))
    {
        f = a.flow;
    }
    if let Some((top, bottom)) = spec.perspective {
        let t = if spec.height > 1 { y as f32 / (spec.height - 1) as f32 } else { 0.0 };
        let s = top + (bottom - top) * t;
        f = (f.0 * s, f.1 * s);
    }
    f
}

fn render_flow(spec: &SceneSpec, frame: usize) -> FlowField {
    let (w, h) = (spec.width, spec.height);
    let mut rng = frame_rng(spec.seed, frame);
    let a = spec.noise as f64;
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = flow_at(spec, frame, x, y);
            let nu = a * (2.0 * rng.next_f64() - 1.0);
            let nv = a * (2.0 * rng.next_f64() - 1.0);
            u.push(fu + nu as f32);
            v.push(fv + nv as f32);
        }
    }
    FlowField::new(w, h, u, v).expect("synthetic flow is finite and sized")
}

/// Ground truth implied by the spec's anomalies.
pub fn ground_truth(spec: &SceneSpec) -> GroundTruth {
    let n = spec.frame_count;
    let mut abnormal = vec![false; n];
    let mut masks: Vec<Option<Mask>> = vec![None; n];
    for a in &spec.anomalies {
        for f in a.start_frame..=a.end_frame {
            abnormal[f] = true;
            masks[f]
                .get_or_insert_with(|| Mask::empty(spec.width, spec.height))
                .set_rect(a.rect.x, a.rect.y, a.rect.w, a.rect.h);
        }
    }
    let events = spec
        .anomalies
        .iter()
        .map(|a| Event { start: a.start_frame, end: a.end_frame, label: a.label.clone() })
        .collect();
    GroundTruth { abnormal, masks, events }
}

/// Flow fields for all `frame_count - 1` frame pairs, plus ground truth.
pub fn generate(spec: &SceneSpec) -> Result<(Vec<FlowField>, GroundTruth)> {
    spec.validate()?;
    let flows = (0..spec.frame_count - 1)
        .into_par_iter()
        .map(|t| render_flow(spec, t))
        .collect();
    Ok((flows, ground_truth(spec)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENE: &str = "\
[scene]
width = 40
height = 30
frames = 100
seed = 5
noise = 0.25

[background]
rect = 0, 0, 40, 30
flow = 1, 0

[anomaly]
label = fast
frames = 50, 80
rect = 4, 6, 12, 12
flow = 3, 0
";

    #[test]
    fn xorshift_reference_values() {
        // first outputs of xorshift64* from state 1
        let mut r = XorShift64Star::new(1);
        assert_eq!(r.next_u64(), 0x47E4_CE4B_896C_DD1D);
        assert_eq!(r.next_u64(), 0xABCF_A6A8_E079_651D);
        let mut r = XorShift64Star::new(7);
        assert!((0..1000).map(|_| r.next_f64()).all(|x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn parse_and_round_trip() {
        let spec = SceneSpec::parse(SCENE).unwrap();
        assert_eq!(spec.anomalies.len(), 1);
        assert_eq!(SceneSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn ground_truth_echoes_spec() {
        let spec = SceneSpec::parse(SCENE).unwrap();
        let (flows, gt) = generate(&spec).unwrap();
        assert_eq!(flows.len(), 99);
        assert_eq!(gt.abnormal.iter().filter(|&&a| a).count(), 31);
        assert!(gt.abnormal[50] && gt.abnormal[80] && !gt.abnormal[49] && !gt.abnormal[81]);
        let m = gt.masks[60].as_ref().unwrap();
        assert_eq!(m.count(), 144);
        assert!(m.bits()[6 * 40 + 4] && !m.bits()[6 * 40 + 3]);
        assert_eq!(gt.events, vec![Event { start: 50, end: 80, label: "fast".into() }]);
        let (u, _) = flows[60].at(10, 10);
        assert!((u - 3.0).abs() <= 0.25);
        let (u, _) = flows[49].at(10, 10);
        assert!((u - 1.0).abs() <= 0.25);
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = SceneSpec::parse(SCENE).unwrap();
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate(&spec.normal_variant(6)).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn perspective_scales_rows() {
        let mut spec = SceneSpec::parse(SCENE).unwrap();
        spec.noise = 0.0;
        spec.anomalies.clear();
        spec.perspective = Some((0.5, 3.0));
        let (flows, _) = generate(&spec).unwrap();
        assert_eq!(flows[0].at(0, 0).0, 0.5);
        assert_eq!(flows[0].at(0, 29).0, 3.0);
    }

    #[test]
    fn invalid_specs() {
        let missing_seed = SCENE.replace("seed = 5\n", "");
        assert!(matches!(SceneSpec::parse(&missing_seed), Err(Error::InvalidSpec(_))));
        let outside = SCENE.replace("rect = 4, 6, 12, 12", "rect = 35, 6, 12, 12");
        assert!(matches!(SceneSpec::parse(&outside), Err(Error::InvalidSpec(_))));
        let late = SCENE.replace("frames = 50, 80", "frames = 50, 100");
        assert!(matches!(SceneSpec::parse(&late), Err(Error::InvalidSpec(_))));
        let unknown = SCENE.replace("noise", "noize");
        assert!(matches!(SceneSpec::parse(&unknown), Err(Error::InvalidSpec(_))));
    }
}
