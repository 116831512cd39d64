//! On-disk layout of a sequence directory:
//!
//! ```text
//! <seq>/frames/*.pgm            input frames, in file-name order
//! <seq>/flow/flow_NNNNN.flo     flow from frame N to N+1
//! <seq>/gt/labels.csv           frame_index,label
//! <seq>/gt/events.csv           start,end,label            (optional)
//! <seq>/gt/masks/mask_NNNNN.pgm anomaly mask of frame N     (optional)
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use stam_core::evaluation::{parse_events, parse_labels, GroundTruth, Mask};
use stam_core::flow_io::{estimate_flow, read_flo, read_pgm, FlowField};

use crate::config::{FlowSource, RunConfig};

pub fn flow_dir(seq: &Path) -> PathBuf {
    seq.join("flow")
}

pub fn flow_path(seq: &Path, n: usize) -> PathBuf {
    flow_dir(seq).join(format!("flow_{n:05}.flo"))
}

pub fn gt_dir(seq: &Path) -> PathBuf {
    seq.join("gt")
}

pub fn mask_path(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("mask_{n:05}.pgm"))
}

/// Sequence name used for its output directory.
pub fn name(seq: &Path) -> String {
    seq.file_name().map_or_else(|| "sequence".to_string(), |n| n.to_string_lossy().into_owned())
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

pub fn frames(seq: &Path) -> Result<Vec<PathBuf>> {
    let files = list(&seq.join("frames"), "pgm")?;
    if files.len() < 2 {
        bail!("{} needs at least two .pgm frames, found {}", seq.join("frames").display(), files.len());
    }
    Ok(files)
}

/// Flow between consecutive frames with the baseline estimator.
pub fn estimate(seq: &Path, cfg: &RunConfig) -> Result<Vec<FlowField>> {
    let paths = frames(seq)?;
    let images = paths.iter().map(|p| read_pgm(p).map_err(Into::into)).collect::<Result<Vec<_>>>()?;
    images
        .par_windows(2)
        .map(|w| estimate_flow(&w[0], &w[1], &cfg.estimator).map_err(Into::into))
        .collect()
}

/// All flows of a sequence, clamped on ingest.
pub fn flows(seq: &Path, cfg: &RunConfig) -> Result<Vec<FlowField>> {
    let flows = match cfg.flow_source {
        FlowSource::Estimate => estimate(seq, cfg)?,
        FlowSource::Precomputed => {
            let files = list(&flow_dir(seq), "flo")?;
            if files.is_empty() {
                bail!("no .flo files in {}", flow_dir(seq).display());
            }
            files.iter().map(|p| read_flo(p).map_err(Into::into)).collect::<Result<Vec<_>>>()?
        }
    };
    let dims = flows[0].dims();
    if let Some(i) = flows.iter().position(|f| f.dims() != dims) {
        bail!("flow {} of {} is {:?}, expected {:?}", i, seq.display(), flows[i].dims(), dims);
    }
    Ok(flows.into_iter().map(|f| f.clamped(cfg.estimator.clamp)).collect())
}

/// Ground truth for `frame_count` frames; masks are loaded when present.
pub fn ground_truth(seq: &Path, frame_count: usize) -> Result<GroundTruth> {
    let gt = gt_dir(seq);
    let labels_path = gt.join("labels.csv");
    let text = std::fs::read_to_string(&labels_path).with_context(|| format!("reading {}", labels_path.display()))?;
    let abnormal = parse_labels(&text, frame_count).with_context(|| labels_path.display().to_string())?;
    let events_path = gt.join("events.csv");
    let events = if events_path.exists() {
        let text = std::fs::read_to_string(&events_path)?;
        parse_events(&text).with_context(|| events_path.display().to_string())?
    } else {
        Vec::new()
    };
    let mask_dir = gt.join("masks");
    let masks = (0..frame_count)
        .map(|f| {
            let p = mask_path(&mask_dir, f);
            if p.exists() {
                Ok(Some(Mask::from_frame(&read_pgm(&p)?)))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = GroundTruth { abnormal, masks, events };
    truth.validate()?;
    Ok(truth)
}
