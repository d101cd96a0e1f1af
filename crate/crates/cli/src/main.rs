//! `fpw`: fisheye composites, exemplar mapping, NMS and evaluation from the
//! command line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::Point2;
use rayon::prelude::*;

use fpw_core::boxmap::{FisheyeDetection, ScalingMode};
use fpw_core::compositor::{build_composite, patch_sidecar, CompositeLuts};
use fpw_core::config::{PipelineConfig, CONFIG_ENV};
use fpw_core::evaluation::{average_runs, curve_svg, evaluate, GroundTruth};
use fpw_core::exemplars::{generate_all_targets, ExemplarBank};
use fpw_core::io::{
    composite_id, fisheye_records, group_by_composite, ingest_composite, read_fisheye_detections, read_ground_truth, read_jsonl,
    write_ground_truth, write_json_atomic, write_jsonl, CompositeDetection,
};
use fpw_core::nms::{stage2_nms, Stage2Method};
use fpw_core::pipeline::{BenchReport, Pipeline, SubprocessDetector};
use fpw_core::raster::Raster;
use fpw_core::synth::{add_noise, random_scene, render_fisheye, RandomSceneConfig, SyntheticScene};
use fpw_core::Error;

#[derive(Parser)]
#[command(name = "fpw", version, about = "Pedestrian detection in top-view fisheye images")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (JSON); defaults apply when omitted.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Stage-2 suppression: hard, gnms or bbr.
    #[arg(long, global = true)]
    nms: Option<Stage2Method>,
    /// Gaussian soft-NMS parameter.
    #[arg(long, global = true)]
    ag: Option<f64>,
    /// IOU threshold of the per-patch stage-1 suppression.
    #[arg(long, global = true)]
    stage1_iou: Option<f64>,
    /// Disable stage-1 suppression.
    #[arg(long, global = true)]
    no_stage1: bool,
    /// Use the second composite as test-time augmentation.
    #[arg(long, global = true)]
    tta: bool,
    #[arg(long, global = true)]
    k_r: Option<usize>,
    /// Confidence scaling: none, containment, overlap or both.
    #[arg(long, global = true)]
    scaling: Option<ScalingMode>,
    /// Directory of exemplar caches.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Warp lookup tables.
    Luts {
        #[command(subcommand)]
        cmd: LutsCmd,
    },
    /// Write the composite images of a fisheye frame with their patch sidecars.
    Warp {
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Frame stem used in composite ids; defaults to the file stem.
        #[arg(long)]
        stem: Option<String>,
    },
    /// Mapping exemplars.
    Exemplars {
        #[command(subcommand)]
        cmd: ExemplarsCmd,
    },
    /// Map composite detections to the fisheye frame (stage-1 NMS only).
    Map {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 NMS of fisheye detections, per image.
    Nms {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP and LAMR of fisheye detections. Repeat --dets (one file per
    /// composite) to also report the mean over the runs.
    Eval {
        #[arg(long, required = true)]
        dets: Vec<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        /// Report JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for SVG plots of the PR and MR-FPPI curves.
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Full pipeline over frames.
    Run(RunArgs),
    /// Synthetic scenes.
    Synth {
        #[command(subcommand)]
        cmd: SynthCmd,
    },
    /// Per-stage timing over random synthetic frames.
    Bench {
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum LutsCmd {
    /// Build and store the lookup tables of every patch.
    Build {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExemplarsCmd {
    /// Build exemplar caches for the configured composites.
    Build {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Render a scene file (or a random scene) to PNG plus ground truth.
    Render {
        scene: Option<PathBuf>,
        /// Random scene from this seed instead of a scene file.
        #[arg(long, conflicts_with = "scene")]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Additive Gaussian pixel noise.
        #[arg(long)]
        noise: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Fisheye images (PNG). With --perfect-detector, scene files instead.
    inputs: Vec<PathBuf>,
    /// Composite detections as JSON lines keyed by composite id.
    #[arg(long, conflicts_with_all = ["perfect_detector", "detector_cmd"])]
    dets: Option<PathBuf>,
    /// Synthetic detector: inputs are scene files rendered on the fly.
    #[arg(long)]
    perfect_detector: bool,
    /// External detector command, run on every composite image.
    #[arg(long, conflicts_with = "perfect_detector")]
    detector_cmd: Option<String>,
    /// Ground truth for the evaluation report.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Evaluation report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

impl Global {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = self.nms {
            cfg.nms.method = m;
        }
        if let Some(a) = self.ag {
            cfg.nms.a_g = a;
        }
        if let Some(t) = self.stage1_iou {
            cfg.nms.stage1_iou = t;
        }
        if self.no_stage1 {
            cfg.nms.stage1 = false;
        }
        if self.tta {
            cfg.tta = true;
        }
        if let Some(k) = self.k_r {
            cfg.k_r = k;
        }
        if let Some(s) = self.scaling {
            cfg.scaling = s;
        }
        if let Some(d) = &self.cache_dir {
            cfg.exemplar_cache_dir = Some(d.clone());
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(String::from)
        .ok_or_else(|| Error::Data(format!("no file stem in {}", path.display())).into())
}

fn write_fisheye(path: &Path, dets: &BTreeMap<String, Vec<FisheyeDetection>>, origin: Point2<f64>) -> Result<()> {
    let recs: Vec<_> = dets.iter().flat_map(|(id, d)| fisheye_records(id, d, origin)).collect();
    write_jsonl(path, recs)?;
    Ok(())
}

fn write_report(out: Option<&Path>, report: &impl serde::Serialize) -> Result<()> {
    match out {
        Some(p) => write_json_atomic(p, report)?,
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, report)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn luts_build(cfg: PipelineConfig, out_dir: &Path) -> Result<()> {
    let cam = cfg.camera.camera()?;
    fs::create_dir_all(out_dir)?;
    for k in 0..cfg.n_composites() {
        let layout = cfg.composite_layout(k)?;
        let luts = CompositeLuts::build(&layout, &cam)?;
        for (i, lut) in luts.luts.iter().enumerate() {
            let path = out_dir.join(format!("lut_c{k}_p{i}.bin"));
            let mut buf = Vec::new();
            lut.write_to(&mut buf)?;
            fs::write(&path, buf)?;
        }
        write_json_atomic(out_dir.join(format!("composite_c{k}.json")), &patch_sidecar(&layout))?;
    }
    info!("wrote lookup tables to {}", out_dir.display());
    Ok(())
}

fn warp(cfg: PipelineConfig, image: &Path, out_dir: &Path, stem: Option<String>) -> Result<()> {
    let cam = cfg.camera.camera()?;
    let img = Raster::load(image).with_context(|| image.display().to_string())?;
    if img.width != cam.width || img.height != cam.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", cam.width, cam.height),
            actual: format!("{}x{}", img.width, img.height),
        }
        .into());
    }
    let stem = match stem {
        Some(s) => s,
        None => stem_of(image)?,
    };
    fs::create_dir_all(out_dir)?;
    for k in 0..cfg.n_composites() {
        let l = CompositeLuts::build(&cfg.composite_layout(k)?, &cam)?;
        let comp = build_composite(&img, &l)?;
        let id = composite_id(&stem, k);
        comp.raster.save_png(out_dir.join(format!("{id}.png")))?;
        write_json_atomic(out_dir.join(format!("{id}.json")), &patch_sidecar(&l.layout))?;
    }
    Ok(())
}

fn exemplars_build(cfg: PipelineConfig, out_dir: &Path) -> Result<()> {
    let cam = cfg.camera.camera()?;
    let targets = generate_all_targets(&cam, &cfg.exemplars)?;
    fs::create_dir_all(out_dir)?;
    for k in 0..cfg.n_composites() {
        let bank = ExemplarBank::build_from_targets(&cfg.composite_layout(k)?, &cam, &cfg.exemplars, &targets)?;
        let sizes: Vec<usize> = bank.sets.iter().map(|s| s.len()).collect();
        info!("composite {k}: exemplars per patch {sizes:?}");
        bank.save(out_dir.join(format!("exemplars_c{k}.jsonl")))?;
    }
    Ok(())
}

/// Composite detections per frame stem, ingested for every prepared composite.
fn load_composite_dets(pipeline: &Pipeline, path: &Path) -> Result<BTreeMap<String, Vec<Vec<fpw_core::boxmap::PatchDetection>>>> {
    let cfg = &pipeline.config;
    let dets: Vec<CompositeDetection> = read_jsonl(path).with_context(|| path.display().to_string())?;
    let mut out = BTreeMap::new();
    for (stem, per) in group_by_composite(dets)? {
        let mut frame = vec![Vec::new(); pipeline.composites.len()];
        for (k, d) in per {
            let Some(slot) = frame.get_mut(k) else {
                log::warn!("{stem}: detections for composite {k} ignored, only {} prepared", pipeline.composites.len());
                continue;
            };
            *slot = ingest_composite(&d, &pipeline.composite(k)?.layout, &cfg.person_class, cfg.score_threshold)?;
        }
        out.insert(stem, frame);
    }
    Ok(out)
}

fn map_cmd(cfg: PipelineConfig, dets: &Path, out: &Path) -> Result<()> {
    let pipeline = Pipeline::new(cfg)?;
    let frames = load_composite_dets(&pipeline, dets)?;
    let mut mapped = BTreeMap::new();
    for (stem, per) in frames {
        let mut all = Vec::new();
        for (k, d) in per.iter().enumerate() {
            all.extend(pipeline.map_composite(k, d)?.0);
        }
        mapped.insert(stem, all);
    }
    write_fisheye(out, &mapped, pipeline.camera.center())
}

fn nms_cmd(cfg: PipelineConfig, dets: &Path, out: &Path) -> Result<()> {
    let cam = cfg.camera.camera()?;
    let dets = read_fisheye_detections(dets).with_context(|| dets.display().to_string())?;
    let kept: BTreeMap<_, _> = dets
        .into_iter()
        .map(|(id, d)| (id, stage2_nms(&d, &cfg.nms, cam.center(), cam.width)))
        .collect();
    write_fisheye(out, &kept, cam.center())
}

fn eval_report(
    cfg: &PipelineConfig,
    dets: &BTreeMap<String, Vec<FisheyeDetection>>,
    gt: &[GroundTruth],
    out: Option<&Path>,
    plots: Option<&Path>,
) -> Result<()> {
    let cam = cfg.camera.camera()?;
    let r = evaluate(dets, gt, cam.center(), &cfg.eval)?;
    eprintln!("AP {:.4}  LAMR {:.4}  ({} images, {} GT, {} detections)", r.ap, r.lamr, r.n_images, r.n_gt, r.n_detections);
    if let Some(dir) = plots {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("pr.svg"), curve_svg(&r.pr_curve, "precision-recall", "recall", "precision", false))?;
        fs::write(dir.join("mr_fppi.svg"), curve_svg(&r.mr_fppi_curve, "miss rate vs FPPI", "FPPI", "miss rate", true))?;
    }
    write_report(out, &r)
}

fn run_cmd(cfg: PipelineConfig, args: &RunArgs) -> Result<()> {
    if args.inputs.is_empty() && args.dets.is_none() {
        return Err(config_err("run needs input images, scene files or --dets"));
    }
    let pipeline = Pipeline::new(cfg.clone())?;
    let tta = cfg.tta;
    let pool = pipeline.worker_pool()?;
    let frame = |image: Option<&Raster>, per: &[Vec<fpw_core::boxmap::PatchDetection>]| -> fpw_core::Result<Vec<FisheyeDetection>> {
        let out = if tta {
            pipeline.run_frame_tta(image, &per[0], &per[1])?
        } else {
            pipeline.run_frame(image, &per[0])?
        };
        Ok(out.detections)
    };
    let mut gt: Vec<GroundTruth> = Vec::new();
    let results: BTreeMap<String, Vec<FisheyeDetection>> = if args.perfect_detector {
        let cam = pipeline.camera;
        let scenes = args
            .inputs
            .iter()
            .map(|p| -> Result<(String, SyntheticScene)> {
                let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
                let scene = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
                Ok((stem_of(p)?, scene))
            })
            .collect::<Result<Vec<_>>>()?;
        let outs = pool.install(|| {
            scenes
                .par_iter()
                .map(|(stem, scene)| {
                    let render = render_fisheye(scene, &cam, stem)?;
                    let per = (0..pipeline.composites.len())
                        .map(|k| pipeline.perfect_detector(&render, k))
                        .collect::<fpw_core::Result<Vec<_>>>()?;
                    Ok((stem.clone(), frame(Some(&render.image), &per)?, render.ground_truth))
                })
                .collect::<fpw_core::Result<Vec<_>>>()
        })?;
        outs.into_iter()
            .map(|(s, d, g)| {
                gt.push(g);
                (s, d)
            })
            .collect()
    } else if let Some(cmd) = &args.detector_cmd {
        let det = SubprocessDetector::parse(cmd)?;
        let tmp = tempfile::tempdir()?;
        let mut out = BTreeMap::new();
        for path in &args.inputs {
            let img = Raster::load(path).with_context(|| path.display().to_string())?;
            let stem = stem_of(path)?;
            let mut per = Vec::new();
            for k in 0..pipeline.composites.len() {
                let id = composite_id(&stem, k);
                let png = tmp.path().join(format!("{id}.png"));
                pipeline.warp(&img, k)?.raster.save_png(&png)?;
                let raw = det.detect(&png, &id)?;
                per.push(ingest_composite(&raw, &pipeline.composite(k)?.layout, &cfg.person_class, cfg.score_threshold)?);
            }
            out.insert(stem, frame(Some(&img), &per)?);
        }
        out
    } else {
        let path = args.dets.as_ref().ok_or_else(|| config_err("run needs --dets, --detector-cmd or --perfect-detector"))?;
        let mut frames = load_composite_dets(&pipeline, path)?;
        let images: BTreeMap<String, &PathBuf> = args.inputs.iter().map(|p| Ok((stem_of(p)?, p))).collect::<Result<_>>()?;
        for stem in images.keys() {
            frames.entry(stem.clone()).or_insert_with(|| vec![Vec::new(); pipeline.composites.len()]);
        }
        pool.install(|| {
            frames
                .par_iter()
                .map(|(stem, per)| {
                    let img = images.get(stem).map(Raster::load).transpose()?;
                    Ok((stem.clone(), frame(img.as_ref(), per)?))
                })
                .collect::<fpw_core::Result<BTreeMap<_, _>>>()
        })?
    };
    write_fisheye(&args.out, &results, pipeline.camera.center())?;
    if let Some(p) = &args.gt {
        gt = read_ground_truth(p).with_context(|| p.display().to_string())?;
    }
    if let Some(report) = &args.report {
        if gt.is_empty() {
            return Err(config_err("--report needs --gt or --perfect-detector"));
        }
        eval_report(&cfg, &results, &gt, Some(report), None)?;
    }
    Ok(())
}

fn synth_render(cfg: PipelineConfig, scene: Option<&Path>, seed: Option<u64>, out_dir: &Path, noise: Option<f64>) -> Result<()> {
    let cam = cfg.camera.camera()?;
    let (stem, scene) = match (scene, seed) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            let s: SyntheticScene = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            (stem_of(p)?, s)
        }
        (None, Some(seed)) => (format!("scene_{seed:04}"), random_scene(seed, &RandomSceneConfig::default())),
        (None, None) => return Err(config_err("synth render needs a scene file or --seed")),
    };
    let mut r = render_fisheye(&scene, &cam, &stem)?;
    if let Some(sigma) = noise {
        add_noise(&mut r.image, sigma, scene.seed.or(seed).unwrap_or(0))?;
    }
    fs::create_dir_all(out_dir)?;
    r.image.save_png(out_dir.join(format!("{stem}.png")))?;
    write_ground_truth(out_dir.join(format!("{stem}_gt.jsonl")), &[r.ground_truth])?;
    if seed.is_some() {
        write_json_atomic(out_dir.join(format!("{stem}.json")), &scene)?;
    }
    Ok(())
}

fn bench(cfg: PipelineConfig, frames: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let pipeline = Pipeline::new(cfg)?;
    let cam = pipeline.camera;
    let mut timings = Vec::with_capacity(frames);
    let mut total = 0;
    for i in 0..frames {
        let s = seed + i as u64;
        let render = render_fisheye(&random_scene(s, &RandomSceneConfig::default()), &cam, &format!("bench_{s}"))?;
        let per = (0..pipeline.composites.len())
            .map(|k| pipeline.perfect_detector(&render, k))
            .collect::<fpw_core::Result<Vec<_>>>()?;
        let o = if per.len() > 1 {
            pipeline.run_frame_tta(Some(&render.image), &per[0], &per[1])?
        } else {
            pipeline.run_frame(Some(&render.image), &per[0])?
        };
        total += o.detections.len();
        timings.push(o.timing);
    }
    write_report(out, &BenchReport::from_timings(&timings, total))
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = cli.global.config()?;
    match cli.command {
        Command::Luts { cmd: LutsCmd::Build { out_dir } } => luts_build(cfg, &out_dir),
        Command::Warp { image, out_dir, stem } => warp(cfg, &image, &out_dir, stem),
        Command::Exemplars { cmd: ExemplarsCmd::Build { out_dir } } => exemplars_build(cfg, &out_dir),
        Command::Map { dets, out } => map_cmd(cfg, &dets, &out),
        Command::Nms { dets, out } => nms_cmd(cfg, &dets, &out),
        Command::Eval { dets, gt, out, plots } => {
            let g = read_ground_truth(&gt).with_context(|| gt.display().to_string())?;
            let runs = dets
                .iter()
                .map(|p| read_fisheye_detections(p).with_context(|| p.display().to_string()))
                .collect::<Result<Vec<_>>>()?;
            if let [single] = runs.as_slice() {
                return eval_report(&cfg, single, &g, out.as_deref(), plots.as_deref());
            }
            let cam = cfg.camera.camera()?;
            let results = runs
                .iter()
                .map(|d| evaluate(d, &g, cam.center(), &cfg.eval))
                .collect::<fpw_core::Result<Vec<_>>>()?;
            let (ap, lamr) = average_runs(&results).expect("at least two runs");
            eprintln!("mean over {} runs: AP {ap:.4}  LAMR {lamr:.4}", results.len());
            write_report(out.as_deref(), &serde_json::json!({ "ap": ap, "lamr": lamr, "runs": results }))
        }
        Command::Run(args) => run_cmd(cfg, &args),
        Command::Synth {
            cmd: SynthCmd::Render { scene, seed, out_dir, noise },
        } => synth_render(cfg, scene.as_deref(), seed, &out_dir, noise),
        Command::Bench { frames, seed, out } => bench(cfg, frames, seed, out.as_deref()),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_config() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
