use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const CONFIG: &str = r#"{"camera": {"width": 600, "height": 600, "radius": 300}}"#;

/// Config file and exemplar cache shared by every test.
fn workspace() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static W: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    W.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("config.json");
        fs::write(&cfg, CONFIG).unwrap();
        let cache = dir.path().join("cache");
        let out = fpw(&["--config", cfg.to_str().unwrap(), "--tta", "exemplars", "build", "--out-dir", cache.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (dir, cfg, cache)
    })
}

fn fpw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpw"))
        .args(args)
        .env_remove("FPW_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

/// Runs with the shared config and cache.
fn fpw_cfg(args: &[&str]) -> Output {
    let (_, cfg, cache) = workspace();
    let mut all = vec!["--config", cfg.to_str().unwrap(), "--cache-dir", cache.to_str().unwrap()];
    all.extend_from_slice(args);
    fpw(&all)
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn render_run_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&fpw_cfg(&["synth", "render", "--seed", "4", "--out-dir", s(d)]));
    for f in ["scene_0004.png", "scene_0004_gt.jsonl", "scene_0004.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let dets = d.join("dets.jsonl");
    let report = d.join("report.json");
    ok(&fpw_cfg(&[
        "run",
        "--perfect-detector",
        s(&d.join("scene_0004.json")),
        "--out",
        s(&dets),
        "--report",
        s(&report),
    ]));
    let rep: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["ap"], 1.0);
    assert_eq!(rep["lamr"], 0.0);
    let recs = lines(&dets);
    assert!(!recs.is_empty());
    assert!(recs.iter().all(|r| r["image_id"] == "scene_0004" && r["angle_rad"].is_number()));

    // The standalone evaluator agrees with the run report.
    let out = fpw_cfg(&["eval", "--dets", s(&dets), "--gt", s(&d.join("scene_0004_gt.jsonl"))]);
    ok(&out);
    let ev: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ev["ap"], rep["ap"]);
    assert_eq!(ev["tp"], rep["tp"]);

    // Two runs are averaged.
    let empty = d.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = fpw_cfg(&["eval", "--dets", s(&dets), "--dets", s(&empty), "--gt", s(&d.join("scene_0004_gt.jsonl"))]);
    ok(&out);
    let avg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(avg["ap"], 0.5);
    assert_eq!(avg["runs"].as_array().unwrap().len(), 2);

    // Byte-identical output on a second run.
    let again = d.join("again.jsonl");
    ok(&fpw_cfg(&["run", "--perfect-detector", s(&d.join("scene_0004.json")), "--out", s(&again)]));
    assert_eq!(fs::read(&dets).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn warp_map_and_nms_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&fpw_cfg(&["synth", "render", "--seed", "2", "--out-dir", s(d)]));
    ok(&fpw_cfg(&["warp", s(&d.join("scene_0002.png")), "--out-dir", s(d)]));
    let img = image::open(d.join("scene_0002_c0.png")).unwrap();
    assert_eq!((img.width(), img.height()), (608, 608));
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(d.join("scene_0002_c0.json")).unwrap()).unwrap();
    assert_eq!(sidecar.as_array().unwrap().len(), 8);

    // Two overlapping boxes in patch 1 and a non-person line.
    let dets = d.join("composite.jsonl");
    fs::write(
        &dets,
        concat!(
            r#"{"composite_id":"scene_0002_c0","x":180,"y":60,"w":40,"h":90,"score":0.9,"class":"person"}"#,
            "\n",
            r#"{"composite_id":"scene_0002_c0","x":182,"y":62,"w":40,"h":90,"score":0.6,"class":"person"}"#,
            "\n",
            r#"{"composite_id":"scene_0002_c0","x":20,"y":20,"w":30,"h":30,"score":0.9,"class":"chair"}"#,
            "\n"
        ),
    )
    .unwrap();
    let mapped = d.join("mapped.jsonl");
    ok(&fpw_cfg(&["--no-stage1", "map", "--dets", s(&dets), "--out", s(&mapped)]));
    assert_eq!(lines(&mapped).len(), 2);
    let kept = d.join("kept.jsonl");
    ok(&fpw_cfg(&["--nms", "hard", "nms", "--dets", s(&mapped), "--out", s(&kept)]));
    let k = lines(&kept);
    assert_eq!(k.len(), 1);
    assert!(k[0]["score"].as_f64().unwrap() > 0.0);

    let out = d.join("out.jsonl");
    ok(&fpw_cfg(&["run", s(&d.join("scene_0002.png")), "--dets", s(&dets), "--out", s(&out)]));
    assert!(!lines(&out).is_empty());
}

#[test]
fn luts_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&fpw_cfg(&["luts", "build", "--out-dir", s(d)]));
    let lut = fs::read(d.join("lut_c0_p0.bin")).unwrap();
    assert_eq!(&lut[..6], b"FPLUT1");
    assert!(d.join("composite_c0.json").exists());
    let out = fpw_cfg(&["bench", "--frames", "3"]);
    ok(&out);
    let b: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(b["frames"], 3);
    assert!(b["warp_ms"]["mean"].as_f64().unwrap() > 0.0);
    assert!(b["nms_ms"]["p95"].is_number());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"kr": 3}"#).unwrap();
    assert_eq!(fpw(&["--config", s(&bad), "bench", "--frames", "1"]).status.code(), Some(2));
    assert_eq!(fpw(&["--config", s(&d.join("missing.json")), "bench"]).status.code(), Some(2));
    assert_eq!(fpw(&["--ag=-1", "bench"]).status.code(), Some(2));
    assert_eq!(fpw(&["--nms", "fancy", "bench"]).status.code(), Some(2));

    let gt = d.join("gt.jsonl");
    fs::write(&gt, r#"{"image_id":"a","boxes":[{"cx":400,"cy":300,"w":30,"h":60}]}"#).unwrap();
    let out = fpw_cfg(&["eval", "--dets", s(&d.join("none.jsonl")), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(3));
    let dets = d.join("d.jsonl");
    fs::write(&dets, "{\"image_id\":\"a\",\"cx\":400,\"cy\":300,\"w\":30,\"h\":60,\"score\":0.9}\n{oops\n").unwrap();
    let out = fpw_cfg(&["eval", "--dets", s(&dets), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn config_comes_from_the_environment() {
    let (_, cfg, cache) = workspace();
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fpw"))
        .args(["synth", "render", "--seed", "1", "--out-dir", s(dir.path()), "--cache-dir", s(cache)])
        .env("FPW_CONFIG", cfg)
        .output()
        .unwrap();
    ok(&out);
    let img = image::open(dir.path().join("scene_0001.png")).unwrap();
    assert_eq!(img.width(), 600);
}
