//! Flow fields, grayscale frames and their on-disk formats.
//!
//! Flow is exchanged as Middlebury `.flo`: a little-endian `f32` magic
//! (202021.25), `i32` width, `i32` height, then interleaved `f32` `(u, v)`
//! pairs in row-major order. Frames and masks are binary PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;
const FLO_HEADER_LEN: usize = 12;

/// Default bound on |u| and |v| applied to flow entering the pipeline.
pub const DEFAULT_FLOW_CLAMP: f32 = 32.0;

/// An 8-bit grayscale frame stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    intensity: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, intensity: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("empty frame {width}x{height}")));
        }
        if intensity.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "frame {width}x{height} needs {} intensities, got {}",
                width * height,
                intensity.len()
            )));
        }
        Ok(Self { width, height, intensity })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intensity(&self) -> &[u8] {
        &self.intensity
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.intensity[y * self.width + x]
    }
}

/// Dense per-pixel motion between two consecutive frames, in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("empty flow field {width}x{height}")));
        }
        let n = width * height;
        if u.len() != n || v.len() != n {
            return Err(Error::InvalidInput(format!(
                "flow field {width}x{height} needs {n} components, got u={} v={}",
                u.len(),
                v.len()
            )));
        }
        if let Some(index) = u.iter().zip(&v).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite flow at pixel {index}")));
        }
        Ok(Self { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, u: vec![0.0; n], v: vec![0.0; n] }
    }

    /// A field with the same vector at every pixel.
    pub fn uniform(width: usize, height: usize, u: f32, v: f32) -> Self {
        let n = width * height;
        Self { width, height, u: vec![u; n], v: vec![v; n] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Largest absolute component over both channels.
    pub fn max_abs(&self) -> f32 {
        self.u.iter().chain(&self.v).fold(0.0f32, |m, x| m.max(x.abs()))
    }

    /// Clamps both components into `[-limit, limit]`.
    pub fn clamped(mut self, limit: f32) -> Self {
        for x in self.u.iter_mut().chain(self.v.iter_mut()) {
            *x = x.clamp(-limit, limit);
        }
        self
    }

    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FLO_HEADER_LEN + 8 * self.u.len());
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a `.flo` image; `path` only labels errors.
    pub fn from_flo_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected| Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(FLO_HEADER_LEN));
        }
        let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if magic != FLO_MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf(), found: magic });
        }
        if bytes.len() < FLO_HEADER_LEN {
            return Err(truncated(FLO_HEADER_LEN));
        }
        let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if width <= 0 || height <= 0 {
            return Err(Error::BadHeader {
                path: path.to_path_buf(),
                reason: format!("non-positive flow dimensions {width}x{height}"),
            });
        }
        let (width, height) = (width as usize, height as usize);
        let n = width.checked_mul(height).filter(|n| *n <= (usize::MAX - FLO_HEADER_LEN) / 8);
        let n = n.ok_or_else(|| truncated(usize::MAX))?;
        let expected = FLO_HEADER_LEN + 8 * n;
        if bytes.len() != expected {
            return Err(truncated(expected));
        }
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (index, pair) in bytes[FLO_HEADER_LEN..].chunks_exact(8).enumerate() {
            let a = f32::from_le_bytes(pair[0..4].try_into().unwrap());
            let b = f32::from_le_bytes(pair[4..8].try_into().unwrap());
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite { path: path.to_path_buf(), index });
            }
            u.push(a);
            v.push(b);
        }
        Ok(Self { width, height, u, v })
    }
}

/// Reads a `.flo` file exactly as stored; no clamping is applied.
pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FlowField::from_flo_bytes(&bytes, path)
}

pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, field.to_flo_bytes()).map_err(|e| Error::io(path, e))
}

/// Decodes a binary (`P5`) PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Frame> {
    let bad = |reason: &str| Error::BadHeader { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(bad("expected binary PGM magic P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("missing header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing whitespace after maxval")),
    }
    let n = width * height;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: pos + n,
            found: bytes.len(),
        });
    }
    Frame::new(width, height, payload[..n].to_vec())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.intensity);
    out
}

pub fn write_pgm(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(frame)).map_err(|e| Error::io(path, e))
}

/// Settings for the Horn–Schunck baseline estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEstimatorConfig {
    /// Fixed number of Jacobi sweeps.
    pub iterations: usize,
    /// Smoothness weight; the penalty is `alpha^2 * (|grad u|^2 + |grad v|^2)`.
    pub alpha: f32,
    /// Output components are clamped to `[-clamp, clamp]`.
    pub clamp: f32,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        Self { iterations: 100, alpha: 15.0, clamp: DEFAULT_FLOW_CLAMP }
    }
}

/// Dense Horn–Schunck flow from `prev` to `next`.
///
/// Brightness derivatives are the averaged first differences over the 2×2×2
/// cube of the original formulation, borders replicated. Each sweep reads only
/// the previous iterate, so row-parallel evaluation is bitwise deterministic.
pub fn estimate_flow(prev: &Frame, next: &Frame, cfg: &FlowEstimatorConfig) -> Result<FlowField> {
    if (prev.width, prev.height) != (next.width, next.height) {
        return Err(Error::DimensionMismatch {
            expected: (prev.width, prev.height),
            found: (next.width, next.height),
        });
    }
    let (w, h) = (prev.width, prev.height);
    let n = w * h;
    let e = |f: &Frame, x: usize, y: usize| f.at(x.min(w - 1), y.min(h - 1)) as f32;

    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    let mut it = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (a0, b0, c0, d0) = (e(prev, x, y), e(prev, x + 1, y), e(prev, x, y + 1), e(prev, x + 1, y + 1));
            let (a1, b1, c1, d1) = (e(next, x, y), e(next, x + 1, y), e(next, x, y + 1), e(next, x + 1, y + 1));
            ix[i] = 0.25 * ((b0 - a0) + (d0 - c0) + (b1 - a1) + (d1 - c1));
            iy[i] = 0.25 * ((c0 - a0) + (d0 - b0) + (c1 - a1) + (d1 - b1));
            it[i] = 0.25 * ((a1 - a0) + (b1 - b0) + (c1 - c0) + (d1 - d0));
        }
    }

    let alpha2 = cfg.alpha * cfg.alpha;
    let mut u = vec![0.0f32; n];
    let mut v = vec![0.0f32; n];
    let mut u_next = vec![0.0f32; n];
    let mut v_next = vec![0.0f32; n];
    for _ in 0..cfg.iterations {
        u_next
            .par_chunks_mut(w)
            .zip(v_next.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (urow, vrow))| {
                for x in 0..w {
                    let ubar = neighbour_mean(&u, w, h, x, y);
                    let vbar = neighbour_mean(&v, w, h, x, y);
                    let i = y * w + x;
                    let (gx, gy, gt) = (ix[i], iy[i], it[i]);
                    let k = (gx * ubar + gy * vbar + gt) / (alpha2 + gx * gx + gy * gy);
                    urow[x] = ubar - gx * k;
                    vrow[x] = vbar - gy * k;
                }
            });
        std::mem::swap(&mut u, &mut u_next);
        std::mem::swap(&mut v, &mut v_next);
    }
    let field = FlowField { width: w, height: h, u, v };
    Ok(field.clamped(cfg.clamp))
}

/// Horn–Schunck neighbourhood average: 1/6 edge neighbours, 1/12 corners.
#[inline]
fn neighbour_mean(f: &[f32], w: usize, h: usize, x: usize, y: usize) -> f32 {
    let xm = x.saturating_sub(1);
    let xp = (x + 1).min(w - 1);
    let ym = y.saturating_sub(1);
    let yp = (y + 1).min(h - 1);
    let at = |xx: usize, yy: usize| f[yy * w + xx];
    (at(xm, y) + at(xp, y) + at(x, ym) + at(x, yp)) / 6.0
        + (at(xm, ym) + at(xp, ym) + at(xm, yp) + at(xp, yp)) / 12.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flo_bytes(magic: f32, w: i32, h: i32, payload: &[f32]) -> Vec<u8> {
        let mut b = magic.to_le_bytes().to_vec();
        b.extend_from_slice(&w.to_le_bytes());
        b.extend_from_slice(&h.to_le_bytes());
        for x in payload {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_fixed_flo_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.flo");
        fs::write(&p, flo_bytes(FLO_MAGIC, 2, 1, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        let f = read_flo(&p).unwrap();
        assert_eq!(f.u(), &[1.0, 0.0]);
        assert_eq!(f.v(), &[0.0, -1.0]);
        write_flo(&f, dir.path().join("b.flo")).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join("b.flo")).unwrap());
    }

    #[test]
    fn flo_errors() {
        let p = Path::new("x.flo");
        assert!(matches!(
            FlowField::from_flo_bytes(&flo_bytes(0.0, 1, 1, &[0.0, 0.0]), p),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            FlowField::from_flo_bytes(&flo_bytes(FLO_MAGIC, 2, 2, &[0.0; 6]), p),
            Err(Error::Truncated { expected: 44, found: 36, .. })
        ));
        assert!(matches!(
            FlowField::from_flo_bytes(&flo_bytes(FLO_MAGIC, 1, 1, &[0.0, f32::NAN]), p),
            Err(Error::NonFinite { index: 0, .. })
        ));
        assert!(matches!(FlowField::from_flo_bytes(&[1, 2], p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn one_pixel_field_is_twenty_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.flo");
        write_flo(&FlowField::zeros(1, 1), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 20);
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("z.flo");
        assert!(matches!(write_flo(&FlowField::zeros(1, 1), &p), Err(Error::Io { .. })));
    }

    #[test]
    fn pgm_decoding() {
        let p = Path::new("f.pgm");
        let mut b = b"P5\n2 2\n255\n".to_vec();
        b.extend_from_slice(&[0, 255, 128, 64]);
        let f = decode_pgm(&b, p).unwrap();
        assert_eq!((f.width(), f.height()), (2, 2));
        assert_eq!(f.intensity(), &[0, 255, 128, 64]);
        assert_eq!(decode_pgm(&encode_pgm(&f), p).unwrap(), f);

        let commented = b"P5 # made by hand\n2 # w\n1\n255\n\x07\x08";
        assert_eq!(decode_pgm(commented, p).unwrap().intensity(), &[7, 8]);

        assert!(matches!(decode_pgm(b"P2\n2 2\n255\n0 1 2 3", p), Err(Error::BadHeader { .. })));
        assert!(matches!(decode_pgm(b"P5\n2 2\n65535\n", p), Err(Error::BadHeader { .. })));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01\x02", p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn clamp_bounds_components() {
        let f = FlowField::new(2, 1, vec![40.0, -3.0], vec![-50.0, 1.0]).unwrap().clamped(32.0);
        assert_eq!(f.u(), &[32.0, -3.0]);
        assert_eq!(f.v(), &[-32.0, 1.0]);
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let data: Vec<u8> = (0..64 * 48).map(|i| ((i * 37) % 251) as u8).collect();
        let f = Frame::new(64, 48, data).unwrap();
        for iterations in [0, 1, 7, 100] {
            let cfg = FlowEstimatorConfig { iterations, ..Default::default() };
            let flow = estimate_flow(&f, &f, &cfg).unwrap();
            assert!(flow.u().iter().chain(flow.v()).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mismatched_frames_rejected() {
        let a = Frame::new(4, 4, vec![0; 16]).unwrap();
        let b = Frame::new(4, 2, vec![0; 8]).unwrap();
        assert!(matches!(
            estimate_flow(&a, &b, &FlowEstimatorConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
