use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpw_core::boxmap::{FisheyeDetection, PatchDetection, ScalingMode};
use fpw_core::config::{CameraConfig, PipelineConfig};
use fpw_core::io::{ingest_composite, to_composite};
use fpw_core::nms::Stage2Method;
use fpw_core::pipeline::Pipeline;
use fpw_core::rotrect::iou_rotated;
use fpw_core::synth::{random_scene, render_fisheye, RandomSceneConfig, Rendering, ScenePerson, SyntheticScene};
use fpw_core::Error;

fn small_config() -> PipelineConfig {
    PipelineConfig {
        camera: CameraConfig {
            width: 600,
            height: 600,
            radius: 300.0,
            ..Default::default()
        },
        tta: true,
        ..Default::default()
    }
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| Pipeline::new(small_config()).unwrap())
}

fn with_config(f: impl FnOnce(&mut PipelineConfig)) -> Pipeline {
    let mut p = pipeline().clone();
    f(&mut p.config);
    p
}

fn one_person(x: f64, y: f64) -> SyntheticScene {
    SyntheticScene {
        camera_height: 3.0,
        persons: vec![ScenePerson {
            x,
            y,
            height: 1.7,
            diameter: 0.5,
            gray: 40,
        }],
        background: 128,
        resolution: None,
        seed: None,
    }
}

fn render(scene: &SyntheticScene, id: &str) -> Rendering {
    render_fisheye(scene, &pipeline().camera, id).unwrap()
}

fn same(a: &[FisheyeDetection], b: &[FisheyeDetection]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.score.to_bits() == y.score.to_bits() && x.bbox == y.bbox)
}

#[test]
fn single_person_gives_one_detection() {
    let p = with_config(|c| c.nms.method = Stage2Method::Hard);
    for (x, y) in [(2.0, 0.3), (-1.2, 1.6), (0.4, -2.8)] {
        let r = render(&one_person(x, y), "one");
        let dets = p.perfect_detector(&r, 0).unwrap();
        assert!(!dets.is_empty());
        let out = p.run_frame(Some(&r.image), &dets).unwrap();
        assert_eq!(out.detections.len(), 1, "person at ({x}, {y})");
        let gt = r.person_boxes[0].unwrap();
        let iou = iou_rotated(&out.detections[0].bbox, &gt, p.camera.center());
        assert!(iou >= 0.7, "IOU {iou} for person at ({x}, {y})");
    }
}

#[test]
fn gaussian_nms_keeps_one_confident_box_per_person() {
    let p = pipeline();
    let r = render(&one_person(2.0, 0.3), "one");
    let out = p.run_frame(None, &p.perfect_detector(&r, 0).unwrap()).unwrap();
    let confident = out.detections.iter().filter(|d| d.score >= p.config.eval.report_threshold).count();
    assert_eq!(confident, 1);
}

#[test]
fn empty_input_runs_every_stage() {
    let p = pipeline();
    let r = render(&SyntheticScene { persons: vec![], ..one_person(0.0, 0.0) }, "empty");
    let out = p.run_frame(Some(&r.image), &[]).unwrap();
    assert!(out.detections.is_empty());
    assert!(out.timing.warp_ms > 0.0);
    assert_eq!(out.stats.output, 0);
    assert!(p.run_frame_tta(None, &[], &[]).unwrap().detections.is_empty());
}

#[test]
fn repeated_runs_are_identical() {
    let p = pipeline();
    let r = render(&random_scene(7, &RandomSceneConfig::default()), "s7");
    let d0 = p.perfect_detector(&r, 0).unwrap();
    let d1 = p.perfect_detector(&r, 1).unwrap();
    let a = p.run_frame_tta(Some(&r.image), &d0, &d1).unwrap();
    let b = p.run_frame_tta(Some(&r.image), &d0, &d1).unwrap();
    assert!(same(&a.detections, &b.detections));
}

#[test]
fn output_ignores_detection_line_order() {
    let p = pipeline();
    let layout = p.composites[0].layout;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let r = render(&random_scene(seed, &RandomSceneConfig::default()), "s");
        let mut lines: Vec<_> = p
            .perfect_detector(&r, 0)
            .unwrap()
            .iter()
            .map(|d| to_composite(d, &layout, "s_c0"))
            .collect();
        let first = ingest_composite(&lines, &layout, "person", 0.05).unwrap();
        let base = p.run_frame(None, &first).unwrap().detections;
        for _ in 0..5 {
            lines.shuffle(&mut rng);
            let dets = ingest_composite(&lines, &layout, "person", 0.05).unwrap();
            assert!(same(&p.run_frame(None, &dets).unwrap().detections, &base));
        }
    }
}

#[test]
fn unscaled_mapping_depends_only_on_geometry() {
    let p = with_config(|c| {
        c.scaling = ScalingMode::None;
        c.nms.stage1 = false;
    });
    let r = render(&random_scene(11, &RandomSceneConfig::default()), "s");
    let dets = p.perfect_detector(&r, 0).unwrap();
    let (mapped, _, _) = p.map_composite(0, &dets).unwrap();
    let rescored: Vec<PatchDetection> = dets
        .iter()
        .enumerate()
        .map(|(i, d)| PatchDetection {
            score: 0.1 + 0.8 * ((i * 7) % 10) as f64 / 10.0,
            ..*d
        })
        .collect();
    let (again, _, _) = p.map_composite(0, &rescored).unwrap();
    assert_eq!(mapped.len(), again.len());
    for ((m, a), d) in mapped.iter().zip(&again).zip(&rescored) {
        assert_eq!(m.bbox, a.bbox);
        assert_eq!(a.score, d.score);
    }
}

#[test]
fn tta_never_adds_detections() {
    let p = pipeline();
    for seed in 0..6 {
        let r = render(&random_scene(seed, &RandomSceneConfig::default()), "s");
        let d0 = p.perfect_detector(&r, 0).unwrap();
        let d1 = p.perfect_detector(&r, 1).unwrap();
        let tta = p.run_frame_tta(None, &d0, &d1).unwrap().detections.len();
        let singles = p.run_frame(None, &d0).unwrap().detections.len()
            + Pipeline {
                composites: vec![p.composites[1].clone()],
                ..p.clone()
            }
            .run_frame(None, &d1)
            .unwrap()
            .detections
            .len();
        assert!(tta <= singles, "seed {seed}: {tta} > {singles}");
    }
}

#[test]
fn person_missed_by_second_composite_survives_fusion() {
    // A detector that needs most of the silhouette inside one patch misses
    // people cut by a seam; the second composite's seams sit in between.
    let p = with_config(|c| c.perfect_min_visible = 0.8);
    let mut found = 0;
    for i in 0..72 {
        let a = (i as f64 * 5.0).to_radians();
        for d in [1.0, 2.0, 3.0, 4.0] {
            let r = render(&one_person(d * a.cos(), d * a.sin()), "gap");
            let d0 = p.perfect_detector(&r, 0).unwrap();
            let d1 = p.perfect_detector(&r, 1).unwrap();
            if d0.is_empty() || !d1.is_empty() {
                continue;
            }
            found += 1;
            let out = p.run_frame_tta(None, &d0, &d1).unwrap();
            let gt = r.person_boxes[0].unwrap();
            assert!(out
                .detections
                .iter()
                .any(|x| iou_rotated(&x.bbox, &gt, p.camera.center()) >= 0.5));
        }
    }
    assert!(found > 0, "no person position falls in a gap of the second composite");
}

#[test]
fn exemplar_cache_is_reused_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.tta = false;
    cfg.exemplar_cache_dir = Some(dir.path().to_path_buf());
    let built = Pipeline::new(cfg.clone()).unwrap();
    let cache = dir.path().join("exemplars_c0.jsonl");
    assert!(cache.exists());
    cfg.build_missing_exemplars = false;
    let loaded = Pipeline::new(cfg.clone()).unwrap();
    assert_eq!(built.composites[0].exemplars[3].exemplars(), loaded.composites[0].exemplars[3].exemplars());
    // Same cache file, different camera: rejected when rebuilding is off.
    cfg.camera.radius = 290.0;
    let err = Pipeline::new(cfg).unwrap_err();
    assert!(matches!(err, Error::CacheMismatch { .. }), "{err}");
    assert!(err.is_config());
}
