use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use stam_core::descriptor::Describer;
use stam_core::detector::{DetectorConfig, ModelBuilder, TemporalModel};
use stam_core::evaluation::{
    event_level, events_csv, events_to_string, labels_to_string, linspace, roc_csv, roc_from_counts, GroundTruth,
    LevelCounts, RocCurve,
};
use stam_core::flow_io::{read_pgm, write_flo, write_pgm, FlowField};
use stam_core::pipeline::{clip_trajectories, detect_sequence, parse_scores_csv, PixelScorer, SequenceDetection};
use stam_core::synth::{generate, SceneSpec};
use stam_core::Error;

use crate::config::{RunConfig, EvalParams};
use crate::dataset;
use crate::{Cli, Command};

pub fn execute(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Synth { scene, out } = &cli.command {
        return synth(scene, out);
    }
    let Some(path) = &cli.config else {
        bail!("--config PATH is required for this command");
    };
    let cfg = RunConfig::load(path)?;
    match &cli.command {
        Command::Flow => flow(&cfg),
        Command::Train => train(&cfg),
        Command::Detect => detect(&cfg),
        Command::Eval => eval(&cfg),
        Command::Sweep { k } => sweep(&cfg, k.as_deref().unwrap_or(&cfg.eval.k_list)),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
        Command::Synth { .. } => unreachable!(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn test_sequences(cfg: &RunConfig) -> Result<&[PathBuf]> {
    if cfg.paths.test.is_empty() {
        bail!("no test sequences configured ([paths] test)");
    }
    let mut names = HashSet::new();
    for seq in &cfg.paths.test {
        if !names.insert(dataset::name(seq)) {
            bail!("two test sequences share the name '{}'", dataset::name(seq));
        }
    }
    Ok(&cfg.paths.test)
}

fn output_dir(cfg: &RunConfig, seq: &Path) -> PathBuf {
    cfg.paths.output.join(dataset::name(seq))
}

// ---------------------------------------------------------------------------
// flow

fn flow(cfg: &RunConfig) -> Result<()> {
    let mut seen = HashSet::new();
    let seqs: Vec<&PathBuf> = cfg.paths.train.iter().chain(&cfg.paths.test).filter(|s| seen.insert(*s)).collect();
    if seqs.is_empty() {
        bail!("no sequences configured ([paths] train / test)");
    }
    for seq in seqs {
        let flows = dataset::estimate(seq, cfg)?;
        let dir = dataset::flow_dir(seq);
        create_dir(&dir)?;
        for (n, f) in flows.iter().enumerate() {
            write_flo(f, dataset::flow_path(seq, n))?;
        }
        println!("{}: {} flow fields", seq.display(), flows.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn train(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.descriptor;
    let layout = d.layout()?;
    let mut builder: Option<ModelBuilder> = None;
    let mut dims = None;
    for seq in &cfg.paths.train {
        let flows = dataset::flows(seq, cfg)?;
        let dim = flows[0].dims();
        if *dims.get_or_insert(dim) != dim {
            return Err(Error::DimensionMismatch { expected: dims.unwrap(), found: dim })
                .with_context(|| format!("training sequence {}", seq.display()));
        }
        let b = match builder.as_mut() {
            Some(b) => b,
            None => {
                let grid = d.grid(dim.0, dim.1)?;
                builder.insert(ModelBuilder::new(Describer::new(dim.0, dim.1, grid, layout)?, d.clip_len))
            }
        };
        let clips = clip_trajectories(&flows, d.clip_len)?;
        for traj in &clips {
            b.add_clip(traj)?;
        }
        println!("{}: {} clips", seq.display(), clips.len());
    }
    let model = builder.ok_or(Error::EmptyTraining)?.finish()?;
    if let Some(parent) = cfg.paths.model.parent() {
        create_dir(parent)?;
    }
    model.save(&cfg.paths.model)?;
    print_coverage(&model, &cfg.detector);
    println!("model written to {}", cfg.paths.model.display());
    Ok(())
}

fn print_coverage(model: &TemporalModel, det: &DetectorConfig) {
    let g = model.grid();
    let m = g.len();
    let (lo, hi) = (0..m).map(|i| model.history_len(i)).fold((usize::MAX, 0), |(a, b), n| (a.min(n), b.max(n)));
    let nonactive = (0..m).filter(|&i| model.activity_rate(i) < det.activity_min).count();
    println!(
        "{} locations ({}x{} patches of {}x{} px), {}..{} histograms per location",
        m, g.cols, g.rows, g.patch_w, g.patch_h, lo, hi
    );
    println!("{} locations non-active, {} insufficient for K={}", nonactive, model.insufficient_count(det.k), det.k);
}

// ---------------------------------------------------------------------------
// detect

fn load_model(cfg: &RunConfig) -> Result<TemporalModel> {
    Ok(TemporalModel::load(&cfg.paths.model)?)
}

/// The model must have been trained with the geometry the config describes.
fn check_model(model: &TemporalModel, cfg: &RunConfig, width: usize, height: usize) -> Result<()> {
    let grid = cfg.descriptor.grid(width, height)?;
    let mismatch = |what: String| Err(Error::GeometryMismatch(what).into());
    if *model.grid() != grid {
        let m = model.grid();
        return mismatch(format!(
            "model has {}x{} patches of {}x{} px, config on {}x{} frames gives {}x{} patches of {}x{} px",
            m.cols, m.rows, m.patch_w, m.patch_h, width, height, grid.cols, grid.rows, grid.patch_w, grid.patch_h
        ));
    }
    if *model.layout() != cfg.descriptor.layout()? {
        return mismatch(format!("model bins {:?} differ from config bins {:?}", model.layout(), cfg.descriptor.layout()?));
    }
    if model.clip_len() != cfg.descriptor.clip_len {
        return mismatch(format!("model clip length {} differs from config {}", model.clip_len(), cfg.descriptor.clip_len));
    }
    Ok(())
}

fn detect_one(seq: &Path, model: &TemporalModel, cfg: &RunConfig, det: &DetectorConfig) -> Result<SequenceDetection> {
    let flows = dataset::flows(seq, cfg)?;
    detect_flows(seq, &flows, model, cfg, det)
}

fn detect_flows(
    seq: &Path,
    flows: &[FlowField],
    model: &TemporalModel,
    cfg: &RunConfig,
    det: &DetectorConfig,
) -> Result<SequenceDetection> {
    let (w, h) = flows[0].dims();
    check_model(model, cfg, w, h).with_context(|| seq.display().to_string())?;
    Ok(detect_sequence(flows, model, det)?)
}

fn warn_insufficient(model: &TemporalModel, k: usize) {
    let n = model.insufficient_count(k);
    if n > 0 {
        eprintln!(
            "warning: {n} of {} locations have fewer than K={k} training histograms and are always normal",
            model.grid().len()
        );
    }
}

fn mask_dir(out: &Path) -> PathBuf {
    out.join("masks")
}

/// Drops masks of an earlier run so the directory holds exactly this run's frames.
fn clear_masks(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for p in dataset::list(dir, "pgm")? {
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("mask_")) {
            fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

fn detect(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    warn_insufficient(&model, cfg.detector.k);
    for seq in test_sequences(cfg)? {
        let det = detect_one(seq, &model, cfg, &cfg.detector)?;
        let out = output_dir(cfg, seq);
        let masks = mask_dir(&out);
        create_dir(&masks)?;
        clear_masks(&masks)?;
        det.frame_masks()
            .par_iter()
            .enumerate()
            .map(|(n, m)| Ok(write_pgm(&m.to_frame(), dataset::mask_path(&masks, n))?))
            .collect::<Result<Vec<()>>>()?;
        write(&out.join("scores.csv"), &det.scores_csv())?;
        let flagged = det.frame_flags().iter().filter(|&&f| f).count();
        println!("{}: {flagged} of {} frames flagged", seq.display(), det.frame_count);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

struct Evaluated {
    name: String,
    det: SequenceDetection,
    gt: GroundTruth,
}

fn sweep_thresholds(runs: &[Evaluated], det: &DetectorConfig, ev: &EvalParams) -> Result<Vec<f64>> {
    let finite = runs.iter().flat_map(|r| r.det.frame_scores(det)).filter(|s| s.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
    if lo > hi && (ev.sweep_lo.is_none() || ev.sweep_hi.is_none()) {
        return Err(Error::DegenerateScores).context("no frame received a finite score");
    }
    let lo = ev.sweep_lo.unwrap_or(lo - 1.0);
    let hi = ev.sweep_hi.unwrap_or(hi + 1.0);
    if !(lo < hi) {
        bail!("empty threshold sweep [{lo}, {hi}]");
    }
    Ok(linspace(lo, hi, ev.sweep_steps))
}

/// Frame- and (when every sequence has masks) pixel-level ROC, with counts
/// pooled over all sequences at each threshold.
fn curves(runs: &[Evaluated], det: &DetectorConfig, ev: &EvalParams) -> Result<(RocCurve, Option<RocCurve>)> {
    let thresholds = sweep_thresholds(runs, det, ev)?;
    let scores: Vec<Vec<f64>> = runs.iter().map(|r| r.det.frame_scores(det)).collect();
    let frame: Vec<(f64, LevelCounts)> = thresholds
        .iter()
        .map(|&t| {
            let mut c = LevelCounts::default();
            for (r, s) in runs.iter().zip(&scores) {
                let flags: Vec<bool> = s.iter().map(|&x| x < t).collect();
                c += stam_core::evaluation::frame_counts(&flags, &r.gt)?;
            }
            Ok((t, c))
        })
        .collect::<Result<_>>()?;
    let frame = roc_from_counts(&frame)?;
    if !runs.iter().all(|r| r.gt.has_masks()) {
        return Ok((frame, None));
    }
    let scorers = runs.iter().map(|r| PixelScorer::new(&r.det, &r.gt)).collect::<stam_core::Result<Vec<_>>>()?;
    let pixel: Vec<(f64, LevelCounts)> = thresholds
        .par_iter()
        .map(|&t| {
            let mut c = LevelCounts::default();
            for (r, s) in runs.iter().zip(&scorers) {
                c += s.counts_at(&r.det, det, t);
            }
            (t, c)
        })
        .collect();
    Ok((frame, Some(roc_from_counts(&pixel)?)))
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let mut runs = Vec::new();
    for seq in test_sequences(cfg)? {
        let out = output_dir(cfg, seq);
        let masks = dataset::list(&mask_dir(&out), "pgm")
            .with_context(|| format!("no detections for {}; run `stam detect` first", seq.display()))?;
        let Some(first) = masks.first() else {
            bail!("no detection masks in {}; run `stam detect` first", mask_dir(&out).display());
        };
        let frame = read_pgm(first)?;
        let scores_path = out.join("scores.csv");
        let text = fs::read_to_string(&scores_path).with_context(|| format!("reading {}", scores_path.display()))?;
        let det = parse_scores_csv(&text, &model, &cfg.detector, frame.width(), frame.height(), masks.len())
            .with_context(|| scores_path.display().to_string())?;
        let gt = dataset::ground_truth(seq, masks.len())?;
        runs.push(Evaluated { name: dataset::name(seq), det, gt });
    }

    let (frame, pixel) = curves(&runs, &cfg.detector, &cfg.eval)?;
    let mut table: Vec<(&str, &RocCurve)> = vec![("frame", &frame)];
    if let Some(p) = &pixel {
        table.push(("pixel", p));
    }
    create_dir(&cfg.paths.output)?;
    write(&cfg.paths.output.join("metrics.csv"), &roc_csv(&table))?;

    let (mut hits, mut misses, mut false_alarms) = (0, 0, 0);
    for r in &runs {
        let flags = r.det.frame_flags();
        let masks = r.det.frame_masks();
        let detected = r.gt.has_masks().then_some(masks.as_slice());
        let report = event_level(&flags, detected, &r.gt, cfg.eval.merge_gap)?;
        hits += report.hits;
        misses += report.misses;
        false_alarms += report.false_alarms;
        write(&cfg.paths.output.join(&r.name).join("events.csv"), &events_csv(&report))?;
    }

    println!("frame level: AUC {:.4}, EER {:.4}", frame.auc, frame.eer);
    match &pixel {
        Some(p) => println!("pixel level: AUC {:.4}, EER {:.4}", p.auc, p.eer),
        None => println!("pixel level: skipped (no ground-truth masks)"),
    }
    println!("events: {hits} hit, {misses} missed, {false_alarms} false alarms");
    println!("metrics written to {}", cfg.paths.output.join("metrics.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

fn sweep(cfg: &RunConfig, ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        bail!("no K values to sweep");
    }
    let model = load_model(cfg)?;
    let mut tests = Vec::new();
    for seq in test_sequences(cfg)? {
        let flows = dataset::flows(seq, cfg)?;
        let gt = dataset::ground_truth(seq, flows.len() + 1)?;
        tests.push((seq, flows, gt));
    }
    let mut csv = String::from("K,EER_frame,EER_pixel\n");
    let mut eers = Vec::new();
    for &k in ks {
        let det = DetectorConfig { k, ..cfg.detector };
        det.validate()?;
        warn_insufficient(&model, k);
        let runs = tests
            .iter()
            .map(|(seq, flows, gt)| {
                Ok(Evaluated {
                    name: dataset::name(seq),
                    det: detect_flows(seq, flows, &model, cfg, &det)?,
                    gt: gt.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (frame, pixel) = curves(&runs, &det, &cfg.eval)?;
        let pixel_eer = pixel.as_ref().map(|p| format!("{:.6}", p.eer)).unwrap_or_default();
        csv.push_str(&format!("{k},{:.6},{pixel_eer}\n", frame.eer));
        println!("K={k}: frame EER {:.4}{}", frame.eer, pixel.map(|p| format!(", pixel EER {:.4}", p.eer)).unwrap_or_default());
        eers.push(frame.eer);
    }
    create_dir(&cfg.paths.output)?;
    write(&cfg.paths.output.join("sweep.csv"), &csv)?;
    let spread = eers.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - eers.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("frame EER spread over K: {:.2} points", 100.0 * spread);
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

fn synth(scene: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(scene).with_context(|| format!("reading {}", scene.display()))?;
    let spec = SceneSpec::parse(&text).with_context(|| scene.display().to_string())?;
    let stem = scene.file_stem().map_or_else(|| "scene".into(), |s| s.to_string_lossy().into_owned());
    let (flows, gt) = generate(&spec)?;

    let test = out.join(&stem);
    write_flows(&test, &flows)?;
    let gt_dir = dataset::gt_dir(&test);
    let mask_dir = gt_dir.join("masks");
    create_dir(&mask_dir)?;
    write(&gt_dir.join("labels.csv"), &labels_to_string(&gt.abnormal))?;
    write(&gt_dir.join("events.csv"), &events_to_string(&gt.events))?;
    for (n, m) in gt.masks.iter().enumerate() {
        if let Some(m) = m {
            write_pgm(&m.to_frame(), dataset::mask_path(&mask_dir, n))?;
        }
    }

    let mut train = Vec::new();
    for (i, variant) in spec.training_variants().iter().enumerate() {
        let name = format!("train_{i:02}");
        write_flows(&out.join(&name), &generate(variant)?.0)?;
        train.push(PathBuf::from(name));
    }

    let mut cfg = RunConfig::default();
    cfg.descriptor.patch_w = 8;
    cfg.descriptor.patch_h = 8;
    cfg.paths.train = train;
    cfg.paths.test = vec![PathBuf::from(&stem)];
    write(&out.join("stam.conf"), &cfg.to_text())?;
    println!(
        "{}: {} flow fields, {} training sequences, config {}",
        test.display(),
        flows.len(),
        spec.training_sequences,
        out.join("stam.conf").display()
    );
    Ok(())
}

fn write_flows(seq: &Path, flows: &[FlowField]) -> Result<()> {
    create_dir(&dataset::flow_dir(seq))?;
    flows
        .par_iter()
        .enumerate()
        .map(|(n, f)| Ok(write_flo(f, dataset::flow_path(seq, n))?))
        .collect()
}
