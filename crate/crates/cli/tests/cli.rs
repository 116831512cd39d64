use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stam_core::flow_io::{write_pgm, Frame};

const SCENE: &str = "\
[scene]
width = 48
height = 48
frames = 80
seed = 11
noise = 0.5
training_sequences = 6

[background]
rect = 0, 0, 48, 48
flow = 1, 0

[anomaly]
label = reverse
frames = 40, 59
rect = 16, 16, 16, 16
flow = -1, 0
";

fn stam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stam")).args(args).output().unwrap()
}

fn stam_with(config: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", config.to_str().unwrap()];
    all.extend_from_slice(args);
    stam(&all)
}

fn ok(out: &Output) -> String {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Synthesizes the test scene into `dir` and returns its config path.
fn synth(dir: &Path, scene: &str) -> PathBuf {
    let spec = dir.join("small.scene");
    fs::write(&spec, scene).unwrap();
    ok(&stam(&["synth", spec.to_str().unwrap(), "--out", dir.to_str().unwrap()]));
    dir.join("stam.conf")
}

fn edit_config(path: &Path, from: &str, to: &str) {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.contains(from), "config lacks '{from}'");
    fs::write(path, text.replacen(from, to, 1)).unwrap();
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(stam(&["--help"]).status.code(), Some(0));
    assert_eq!(stam(&["--version"]).status.code(), Some(0));
    assert_eq!(stam(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(stam(&[]).status.code(), Some(1));
    let out = stam(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--config"));
    assert_eq!(stam(&["--config", "/nonexistent/stam.conf", "train"]).status.code(), Some(1));
}

#[test]
fn bad_configs_exit_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "[detector]\nk = 20\nfrobs = 3\n").unwrap();
    let out = stam_with(&cfg, &["config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("frobs"));
    fs::write(&cfg, "[detector]\nk = 20\n").unwrap();
    assert_eq!(stam_with(&cfg, &["--threads", "0", "config"]).status.code(), Some(1));
}

#[test]
fn config_dump_is_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("a.conf");
    fs::write(&cfg, "[detector]\nk=30\ncombine = and\n\n[descriptor]\npatch_w = 4\n").unwrap();
    let dumped = ok(&stam_with(&cfg, &["config"]));
    assert!(dumped.contains("k = 30") && dumped.contains("combine = and") && dumped.contains("patch_w = 4"));
    let again = dir.path().join("b.conf");
    fs::write(&again, &dumped).unwrap();
    assert_eq!(ok(&stam_with(&again, &["config"])), dumped);
}

#[test]
fn synthetic_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), SCENE);
    let test = dir.path().join("small");
    assert_eq!(fs::read_dir(test.join("flow")).unwrap().count(), 79);
    assert_eq!(fs::read_dir(test.join("gt/masks")).unwrap().count(), 20);
    edit_config(&cfg, "sweep_steps = 200", "sweep_steps = 50");

    let summary = ok(&stam_with(&cfg, &["train"]));
    assert!(summary.contains("48..48 histograms per location"), "{summary}");
    assert!(summary.contains("0 insufficient for K=20"), "{summary}");
    ok(&stam_with(&cfg, &["detect"]));

    let out = dir.path().join("output");
    let masks = read_dir_bytes(&out.join("small/masks"));
    assert_eq!(masks.len(), 80);
    assert_eq!(masks[0].0, "mask_00000.pgm");
    let scores = fs::read_to_string(out.join("small/scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("frame,location,L_temporal,L_spatial,label"));
    assert_eq!(scores.lines().count(), 1 + 8 * 36);
    assert!(scores.contains(",seed"));

    let report = ok(&stam_with(&cfg, &["eval"]));
    assert!(report.contains("frame level: AUC 1.0000"), "{report}");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains(",frame,")).count(), 50);
    assert_eq!(metrics.lines().filter(|l| l.contains(",pixel,")).count(), 50);
    assert!(metrics.contains("\nlevel,AUC,EER\nframe,1.000000,0.000000\n"));
    assert_eq!(fs::read_to_string(out.join("small/events.csv")).unwrap(), "event_id,hit,first_detected_frame\n0,1,40\n");

    ok(&stam_with(&cfg, &["sweep", "--k", "15,30"]));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().collect::<Vec<_>>(), ["K,EER_frame,EER_pixel", "15,0.000000,0.000000", "30,0.000000,0.000000"]);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), SCENE);
    let out = dir.path().join("output");
    let mut runs = Vec::new();
    for threads in ["1", "4"] {
        ok(&stam_with(&cfg, &["--threads", threads, "train"]));
        ok(&stam_with(&cfg, &["--threads", threads, "detect"]));
        ok(&stam_with(&cfg, &["--threads", threads, "eval"]));
        runs.push((
            fs::read(dir.path().join("model.stam")).unwrap(),
            read_dir_bytes(&out.join("small/masks")),
            read_dir_bytes(&out.join("small")).into_iter().filter(|(n, _)| n.ends_with(".csv")).collect::<Vec<_>>(),
            fs::read(out.join("metrics.csv")).unwrap(),
        ));
    }
    assert!(runs[0] == runs[1]);
}

#[test]
fn static_test_scene_gives_empty_masks() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SCENE.replace("flow = 1, 0", "flow = 0, 0").replace("flow = -1, 0", "flow = 0, 0");
    let cfg = synth(dir.path(), &scene);
    ok(&stam_with(&cfg, &["train"]));
    ok(&stam_with(&cfg, &["detect"]));
    for (name, bytes) in read_dir_bytes(&dir.path().join("output/small/masks")) {
        let body_start = bytes.len() - 48 * 48;
        assert!(bytes[body_start..].iter().all(|&b| b == 0), "{name}");
    }
}

#[test]
fn geometry_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), SCENE);
    ok(&stam_with(&cfg, &["train"]));
    edit_config(&cfg, "patch_w = 8", "patch_w = 6");
    let out = stam_with(&cfg, &["detect"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("geometry mismatch"), "{}", stderr(&out));
}

#[test]
fn training_with_one_clip_leaves_every_location_insufficient() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SCENE.replace("frames = 80", "frames = 12").replace("frames = 40, 59", "frames = 2, 5");
    let cfg = synth(dir.path(), &scene);
    edit_config(&cfg, "train = train_00, train_01, train_02, train_03, train_04, train_05", "train = train_00");
    let summary = ok(&stam_with(&cfg, &["train"]));
    assert!(summary.contains("1..1 histograms per location"), "{summary}");
    assert!(summary.contains("36 insufficient for K=20"), "{summary}");
    let out = stam_with(&cfg, &["detect"]);
    assert!(stderr(&out).contains("warning: 36 of 36 locations"), "{}", stderr(&out));
}

#[test]
fn corrupt_flow_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), SCENE);
    let bad = dir.path().join("train_03/flow/flow_00007.flo");
    fs::write(&bad, b"PIEH garbage").unwrap();
    let out = stam_with(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("flow_00007.flo"), "{}", stderr(&out));
}

#[test]
fn flow_estimation_writes_one_field_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    fs::create_dir_all(seq.join("frames")).unwrap();
    for t in 0..6 {
        let data = (0..32 * 24).map(|i| (((i % 32 + t) * 37 + (i / 32) * 11) % 251) as u8).collect();
        write_pgm(&Frame::new(32, 24, data).unwrap(), seq.join(format!("frames/f{t:03}.pgm"))).unwrap();
    }
    let cfg = dir.path().join("stam.conf");
    fs::write(&cfg, "[flow]\niterations = 20\n\n[paths]\ntest = seq\n").unwrap();
    ok(&stam_with(&cfg, &["flow"]));
    let first = read_dir_bytes(&seq.join("flow"));
    assert_eq!(first.len(), 5);
    assert_eq!(first[4].0, "flow_00004.flo");
    ok(&stam_with(&cfg, &["--threads", "2", "flow"]));
    assert!(read_dir_bytes(&seq.join("flow")) == first);

    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("frames")).unwrap();
    fs::write(&cfg, "[paths]\ntest = empty\n").unwrap();
    let out = stam_with(&cfg, &["flow"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("at least two"), "{}", stderr(&out));
}

#[test]
fn eval_without_detections_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), SCENE);
    ok(&stam_with(&cfg, &["train"]));
    let out = stam_with(&cfg, &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("stam detect"), "{}", stderr(&out));
}
