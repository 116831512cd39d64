//! Clip segmentation and per-pixel particle advection.
//!
//! Coordinates are zero-based: a particle lives in `[0, W-1] x [0, H-1]`.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow_io::FlowField;

/// Splits `frame_count` frames into consecutive disjoint clips of `clip_len`
/// frames. A trailing remainder shorter than a clip is dropped.
pub fn segment_clips(frame_count: usize, clip_len: usize) -> Result<Vec<Range<usize>>> {
    if clip_len < 2 {
        return Err(Error::InvalidInput(format!("clip length must be >= 2, got {clip_len}")));
    }
    Ok((0..frame_count / clip_len)
        .map(|c| c * clip_len..(c + 1) * clip_len)
        .collect())
}

/// The `T - 1` flow fields joining the `T` frames of one clip.
#[derive(Debug, Clone, Copy)]
pub struct Clip<'a> {
    start_frame: usize,
    flows: &'a [FlowField],
    width: usize,
    height: usize,
}

impl<'a> Clip<'a> {
    pub fn new(start_frame: usize, flows: &'a [FlowField]) -> Result<Self> {
        let first = flows
            .first()
            .ok_or_else(|| Error::InvalidInput("a clip needs at least one flow field".into()))?;
        Self::with_dims(start_frame, flows, first.width(), first.height())
    }

    /// Builds a clip whose flows must all be `width x height`.
    pub fn with_dims(start_frame: usize, flows: &'a [FlowField], width: usize, height: usize) -> Result<Self> {
        if flows.is_empty() {
            return Err(Error::InvalidInput("a clip needs at least one flow field".into()));
        }
        if let Some(bad) = flows.iter().find(|f| f.dims() != (width, height)) {
            return Err(Error::DimensionMismatch { expected: (width, height), found: bad.dims() });
        }
        Ok(Self { start_frame, flows, width, height })
    }

    pub fn start_frame(&self) -> usize {
        self.start_frame
    }

    /// Number of frames `T` spanned by the clip.
    pub fn frame_count(&self) -> usize {
        self.flows.len() + 1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Positions of every particle of a clip, one trajectory per start pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectorySet {
    width: usize,
    height: usize,
    len: usize,
    /// `[x, y]` at index `(y0 * width + x0) * len + t`.
    points: Vec<[i32; 2]>,
}

impl TrajectorySet {
    /// Wraps externally produced trajectories, checking that every trajectory
    /// starts on its own pixel and stays inside the frame.
    pub fn from_points(width: usize, height: usize, len: usize, points: Vec<[i32; 2]>) -> Result<Self> {
        if len < 2 || points.len() != width * height * len {
            return Err(Error::InvalidInput(format!(
                "expected {} points for {width}x{height}x{len}, got {}",
                width * height * len,
                points.len()
            )));
        }
        for (i, traj) in points.chunks_exact(len).enumerate() {
            let start = [(i % width) as i32, (i / width) as i32];
            if traj[0] != start {
                return Err(Error::InvalidInput(format!("trajectory {i} does not start at {start:?}")));
            }
            if traj.iter().any(|&[x, y]| x < 0 || y < 0 || x >= width as i32 || y >= height as i32) {
                return Err(Error::InvalidInput(format!("trajectory {i} leaves the frame")));
            }
        }
        Ok(Self { width, height, len, points })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Points per trajectory (the clip length `T`).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Trajectory of the particle that starts at `(x, y)`.
    #[inline]
    pub fn trajectory(&self, x: usize, y: usize) -> &[[i32; 2]] {
        let start = (y * self.width + x) * self.len;
        &self.points[start..start + self.len]
    }
}

/// Round half away from zero, then to `i32`.
#[inline]
fn round_step(d: f32) -> i32 {
    d.round() as i32
}

/// Advects one particle per pixel through the clip.
///
/// Each step reads the flow at the particle's current integer position, adds
/// the rounded displacement and clamps the result to the frame. Particles are
/// re-seeded on their start pixel for every clip.
pub fn advect(clip: &Clip<'_>) -> TrajectorySet {
    let (w, h) = clip.dims();
    let len = clip.frame_count();
    let (max_x, max_y) = (w as i32 - 1, h as i32 - 1);
    let mut points = vec![[0i32; 2]; w * h * len];
    points
        .par_chunks_mut(w * len)
        .enumerate()
        .for_each(|(y0, row)| {
            for (x0, traj) in row.chunks_exact_mut(len).enumerate() {
                let (mut x, mut y) = (x0 as i32, y0 as i32);
                traj[0] = [x, y];
                for (t, flow) in clip.flows.iter().enumerate() {
                    let (u, v) = flow.at(x as usize, y as usize);
                    x = (x + round_step(u)).clamp(0, max_x);
                    y = (y + round_step(v)).clamp(0, max_y);
                    traj[t + 1] = [x, y];
                }
            }
        });
    TrajectorySet { width: w, height: h, len, points }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_segmentation() {
        let clips = segment_clips(200, 10).unwrap();
        assert_eq!(clips.len(), 20);
        assert_eq!(clips[0], 0..10);
        assert_eq!(clips[19], 190..200);
        assert_eq!(segment_clips(25, 10).unwrap(), vec![0..10, 10..20]);
        assert!(segment_clips(9, 10).unwrap().is_empty());
        assert!(segment_clips(10, 1).is_err());
    }

    #[test]
    fn zero_flow_is_a_fixpoint() {
        let flows = vec![FlowField::zeros(6, 4); 4];
        let set = advect(&Clip::new(0, &flows).unwrap());
        for y in 0..4 {
            for x in 0..6 {
                assert!(set.trajectory(x, y).iter().all(|&p| p == [x as i32, y as i32]));
            }
        }
    }

    #[test]
    fn unit_translation() {
        let flows = vec![FlowField::uniform(12, 12, 1.0, 0.0); 3];
        let set = advect(&Clip::new(0, &flows).unwrap());
        assert_eq!(set.len(), 4);
        assert_eq!(set.trajectory(5, 5), &[[5, 5], [6, 5], [7, 5], [8, 5]]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let flows = vec![FlowField::uniform(12, 12, 2.4, -1.6)];
        let set = advect(&Clip::new(0, &flows).unwrap());
        assert_eq!(set.trajectory(5, 5)[1], [7, 3]);
        assert_eq!(round_step(0.5), 1);
        assert_eq!(round_step(-0.5), -1);
        assert_eq!(round_step(-2.5), -3);
    }

    #[test]
    fn particles_stick_to_borders() {
        let flows = vec![FlowField::uniform(5, 5, 3.0, -3.0); 3];
        let set = advect(&Clip::new(0, &flows).unwrap());
        assert_eq!(set.trajectory(3, 1), &[[3, 1], [4, 0], [4, 0], [4, 0]]);
    }

    #[test]
    fn lookup_uses_current_position() {
        // u = 1 only in column 0, zero elsewhere: a particle starting at x=0
        // moves once and then stops.
        let mut u = vec![0.0; 4 * 1];
        u[0] = 1.0;
        let f = FlowField::new(4, 1, u, vec![0.0; 4]).unwrap();
        let flows = vec![f; 3];
        let set = advect(&Clip::new(0, &flows).unwrap());
        assert_eq!(set.trajectory(0, 0), &[[0, 0], [1, 0], [1, 0], [1, 0]]);
    }

    #[test]
    fn mismatched_flow_dims() {
        let flows = vec![FlowField::zeros(4, 4), FlowField::zeros(4, 3)];
        assert!(matches!(Clip::new(0, &flows), Err(Error::DimensionMismatch { .. })));
        let flows = vec![FlowField::zeros(4, 4)];
        assert!(matches!(Clip::with_dims(0, &flows, 5, 4), Err(Error::DimensionMismatch { .. })));
    }
}
