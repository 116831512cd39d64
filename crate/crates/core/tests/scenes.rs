use std::path::PathBuf;

use stam_core::descriptor::{BinLayout, PatchGrid};
use stam_core::detector::DetectorConfig;
use stam_core::pipeline::{detect_sequence, train_sequences, PixelScorer};
use stam_core::synth::{generate, SceneSpec};
use stam_core::Error;

fn scene(name: &str) -> SceneSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenes").join(name);
    SceneSpec::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn trained_detection(spec: &SceneSpec) -> stam_core::pipeline::SequenceDetection {
    let grid = PatchGrid::new(spec.width, spec.height, 8, 8).unwrap();
    let training: Vec<_> = spec.training_variants().iter().map(|v| generate(v).unwrap().0).collect();
    let model = train_sequences(training.iter().map(Vec::as_slice), grid, BinLayout::for_clip(10), 10).unwrap();
    let (flows, _) = generate(spec).unwrap();
    detect_sequence(&flows, &model, &DetectorConfig::default()).unwrap()
}

#[test]
fn bundled_scenes_regenerate_identically() {
    for name in ["uniform.scene", "perspective.scene", "biker.scene"] {
        let spec = scene(name);
        assert_eq!(SceneSpec::parse(&spec.to_text()).unwrap(), spec);
        let (a, ga) = generate(&spec).unwrap();
        let (b, gb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }
}

#[test]
fn ground_truth_is_the_union_of_active_rects() {
    let spec = scene("perspective.scene");
    let (_, gt) = generate(&spec).unwrap();
    for f in 0..spec.frame_count {
        let active: Vec<_> = spec.anomalies.iter().filter(|a| (a.start_frame..=a.end_frame).contains(&f)).collect();
        assert_eq!(gt.abnormal[f], !active.is_empty());
        if let Some(mask) = &gt.masks[f] {
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let inside = active.iter().any(|a| {
                        (a.rect.x..a.rect.x + a.rect.w).contains(&x) && (a.rect.y..a.rect.y + a.rect.h).contains(&y)
                    });
                    assert_eq!(mask.bits()[y * spec.width + x], inside);
                }
            }
        }
    }
}

#[test]
fn bad_specs_are_rejected() {
    let text = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenes/biker.scene")).unwrap();
    let no_seed: String = text.lines().filter(|l| !l.starts_with("seed")).collect::<Vec<_>>().join("\n");
    assert!(matches!(SceneSpec::parse(&no_seed), Err(Error::InvalidSpec(_))));
    let outside = text.replace("rect = 48, 36, 24, 24", "rect = 110, 36, 24, 24");
    assert!(matches!(SceneSpec::parse(&outside), Err(Error::InvalidSpec(_))));
}

#[test]
fn uniform_scene_raises_nothing() {
    let det = trained_detection(&scene("uniform.scene"));
    assert!(det.clips.iter().all(|c| !c.any_detected()));
}

#[test]
fn biker_is_covered() {
    let spec = scene("biker.scene");
    let (_, gt) = generate(&spec).unwrap();
    let det = trained_detection(&spec);
    let masks = det.frame_masks();
    for (f, truth) in gt.masks.iter().enumerate() {
        match truth {
            Some(t) => assert!(masks[f].overlap(t) * 5 >= t.count() * 2, "frame {f}"),
            None => assert!(!masks[f].any(), "frame {f}"),
        }
    }

    // the patch-binned pixel tally agrees with rasterizing every frame
    let cfg = DetectorConfig::default();
    let scorer = PixelScorer::new(&det, &gt).unwrap();
    for t_p in [-600.0, -552.0, -400.0, -300.0, -100.0, 0.0, 50.0] {
        assert_eq!(scorer.counts_at(&det, &cfg, t_p), det.pixel_counts_at(&cfg, &gt, t_p).unwrap(), "t_p {t_p}");
    }
}
