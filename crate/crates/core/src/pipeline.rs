//! Frame processing: warp, ingest patch detections, map them through the
//! exemplars and run the two suppression stages.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::boxmap::{map_detections, FisheyeDetection, IndexedExemplars, MapStats, PatchDetection};
use crate::compositor::{build_composite, CompositeImage, CompositeLayout, CompositeLuts};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::exemplars::{config_hash, generate_all_targets, ExemplarBank};
use crate::geometry::FisheyeCamera;
use crate::io::CompositeDetection;
use crate::nms::{stage1_nms, stage2_nms};
use crate::raster::Raster;
use crate::synth::{perfect_detections, Rendering};

/// Per-stage wall times of one frame, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warp_ms: f64,
    /// Supplied by the caller for external detectors; never measured here.
    pub detector_ms: Option<f64>,
    pub mapping_ms: f64,
    pub nms_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub ingested: usize,
    pub after_stage1: usize,
    pub mapped: usize,
    pub unmappable: usize,
    pub output: usize,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub detections: Vec<FisheyeDetection>,
    pub timing: TimingReport,
    pub stats: FrameStats,
}

/// Warp tables and exemplars for one composite.
#[derive(Debug, Clone)]
pub struct CompositeContext {
    pub layout: CompositeLayout,
    pub luts: CompositeLuts,
    pub exemplars: Vec<IndexedExemplars>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub camera: FisheyeCamera,
    pub composites: Vec<CompositeContext>,
}

fn cache_path(dir: &std::path::Path, k: usize) -> PathBuf {
    dir.join(format!("exemplars_c{k}.jsonl"))
}

impl Pipeline {
    /// Prepares every composite the config needs (two with test-time
    /// augmentation), loading exemplar caches or building them.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let n = config.n_composites();
        Self::with_composites(config, n)
    }

    pub fn with_composites(config: PipelineConfig, n: usize) -> Result<Self> {
        config.validate()?;
        let camera = config.camera.camera()?;
        let mut banks: Vec<Option<ExemplarBank>> = vec![None; n];
        let layouts = (0..n).map(|k| config.composite_layout(k)).collect::<Result<Vec<_>>>()?;
        if let Some(dir) = &config.exemplar_cache_dir {
            for (k, layout) in layouts.iter().enumerate() {
                let path = cache_path(dir, k);
                if !path.exists() {
                    continue;
                }
                match ExemplarBank::load(&path, &config_hash(&camera, layout, &config.exemplars)) {
                    Ok(b) => banks[k] = Some(b),
                    Err(Error::CacheMismatch { .. }) if config.build_missing_exemplars => {
                        warn!("{} was built for another configuration; rebuilding", path.display());
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if banks.iter().any(Option::is_none) {
            if config.exemplar_cache_dir.is_some() && !config.build_missing_exemplars {
                return Err(Error::Config("exemplar cache missing and building is disabled".into()));
            }
            let targets = generate_all_targets(&camera, &config.exemplars)?;
            for (k, layout) in layouts.iter().enumerate() {
                if banks[k].is_some() {
                    continue;
                }
                let t0 = Instant::now();
                let bank = ExemplarBank::build_from_targets(layout, &camera, &config.exemplars, &targets)?;
                info!("built exemplars for composite {k} in {:.1?}", t0.elapsed());
                if let Some(dir) = &config.exemplar_cache_dir {
                    std::fs::create_dir_all(dir)?;
                    bank.save(cache_path(dir, k))?;
                }
                banks[k] = Some(bank);
            }
        }
        let composites = layouts
            .into_iter()
            .zip(banks)
            .map(|(layout, bank)| {
                let bank = bank.expect("every bank loaded or built");
                Ok(CompositeContext {
                    layout,
                    luts: CompositeLuts::build(&layout, &camera)?,
                    exemplars: bank.sets.into_iter().map(IndexedExemplars::new).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            camera,
            composites,
        })
    }

    /// Pipeline from prebuilt banks, one per composite.
    pub fn from_banks(config: PipelineConfig, banks: Vec<ExemplarBank>) -> Result<Self> {
        config.validate()?;
        let camera = config.camera.camera()?;
        let composites = banks
            .into_iter()
            .enumerate()
            .map(|(k, bank)| {
                let layout = config.composite_layout(k)?;
                let want = config_hash(&camera, &layout, &config.exemplars);
                if bank.config_hash != want {
                    return Err(Error::Config(format!("exemplar bank {k} was built for another configuration")));
                }
                Ok(CompositeContext {
                    layout,
                    luts: CompositeLuts::build(&layout, &camera)?,
                    exemplars: bank.sets.into_iter().map(IndexedExemplars::new).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            camera,
            composites,
        })
    }

    pub fn composite(&self, k: usize) -> Result<&CompositeContext> {
        self.composites
            .get(k)
            .ok_or_else(|| Error::Config(format!("composite {k} is not prepared")))
    }

    pub fn warp(&self, image: &Raster, k: usize) -> Result<CompositeImage> {
        if image.width != self.camera.width || image.height != self.camera.height {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.camera.width, self.camera.height),
                actual: format!("{}x{}", image.width, image.height),
            });
        }
        build_composite(image, &self.composite(k)?.luts)
    }

    /// Optional stage-1 suppression then exemplar mapping of one composite's detections.
    pub fn map_composite(&self, k: usize, dets: &[PatchDetection]) -> Result<(Vec<FisheyeDetection>, usize, MapStats)> {
        let ctx = self.composite(k)?;
        let kept = if self.config.nms.stage1 {
            stage1_nms(dets, self.config.nms.stage1_iou)
        } else {
            dets.to_vec()
        };
        let (mapped, stats) = map_detections(&kept, &ctx.exemplars, self.config.k_r, self.config.scaling)?;
        Ok((mapped, kept.len(), stats))
    }

    pub fn stage2(&self, dets: &[FisheyeDetection]) -> Vec<FisheyeDetection> {
        stage2_nms(dets, &self.config.nms, self.camera.center(), self.camera.width)
    }

    fn run(&self, image: Option<&Raster>, per_composite: &[Vec<PatchDetection>]) -> Result<FrameOutput> {
        let mut timing = TimingReport::default();
        let mut stats = FrameStats::default();
        if let Some(img) = image {
            let t = Instant::now();
            for k in 0..per_composite.len() {
                self.warp(img, k)?;
            }
            timing.warp_ms = t.elapsed().as_secs_f64() * 1e3;
        }
        let mut union = Vec::new();
        let mut stage1_ms = 0.0;
        let t_map = Instant::now();
        for (k, dets) in per_composite.iter().enumerate() {
            stats.ingested += dets.len();
            let t1 = Instant::now();
            let kept = if self.config.nms.stage1 {
                stage1_nms(dets, self.config.nms.stage1_iou)
            } else {
                dets.clone()
            };
            stage1_ms += t1.elapsed().as_secs_f64() * 1e3;
            stats.after_stage1 += kept.len();
            let (mapped, s) = map_detections(&kept, &self.composite(k)?.exemplars, self.config.k_r, self.config.scaling)?;
            stats.mapped += s.mapped;
            stats.unmappable += s.unmappable;
            union.extend(mapped);
        }
        timing.mapping_ms = t_map.elapsed().as_secs_f64() * 1e3 - stage1_ms;
        let t2 = Instant::now();
        let detections = self.stage2(&union);
        timing.nms_ms = stage1_ms + t2.elapsed().as_secs_f64() * 1e3;
        stats.output = detections.len();
        Ok(FrameOutput {
            detections,
            timing,
            stats,
        })
    }

    /// One composite: patch detections of composite 0 in, fisheye detections out.
    /// When an image is given the warp is run and timed as well.
    pub fn run_frame(&self, image: Option<&Raster>, dets: &[PatchDetection]) -> Result<FrameOutput> {
        self.run(image, &[dets.to_vec()])
    }

    /// Two composites: detections of both are mapped and pooled before a single
    /// stage-2 pass.
    pub fn run_frame_tta(&self, image: Option<&Raster>, dets0: &[PatchDetection], dets1: &[PatchDetection]) -> Result<FrameOutput> {
        if self.composites.len() < 2 {
            return Err(Error::Config("test-time augmentation needs a second composite".into()));
        }
        self.run(image, &[dets0.to_vec(), dets1.to_vec()])
    }

    /// Synthetic stand-in for a detector on composite `k`.
    pub fn perfect_detector(&self, render: &Rendering, k: usize) -> Result<Vec<PatchDetection>> {
        let layout = &self.composite(k)?.layout;
        let mut dets: Vec<PatchDetection> = perfect_detections(render, &self.camera, layout, self.config.perfect_min_visible)?
            .into_iter()
            .map(|p| p.detection)
            .collect();
        crate::io::sort_canonical(&mut dets);
        Ok(dets)
    }
    /// Thread pool sized by `workers` (all cores when unset) for processing
    /// frames concurrently.
    pub fn worker_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers.unwrap_or(0))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}

/// External detector run once per composite image. The command gets the image
/// path as its last argument and prints detections as JSON lines on stdout;
/// `composite_id` may be omitted there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubprocessDetector {
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Deserialize)]
struct SubprocessLine {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
    #[serde(default = "person")]
    class: String,
}

fn person() -> String {
    "person".into()
}

impl SubprocessDetector {
    /// Splits a command line on whitespace.
    pub fn parse(cmd: &str) -> Result<Self> {
        let mut parts = cmd.split_whitespace().map(String::from);
        let program = parts.next().ok_or_else(|| Error::Config("empty detector command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }

    pub fn detect(&self, image: &Path, composite_id: &str) -> Result<Vec<CompositeDetection>> {
        let out = Command::new(&self.program).args(&self.args).arg(image).output()?;
        if !out.status.success() {
            return Err(Error::Data(format!(
                "detector {} failed on {}: {}",
                self.program,
                image.display(),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let d: SubprocessLine = serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: PathBuf::from(format!("<{} stdout>", self.program)),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                Ok(CompositeDetection {
                    composite_id: composite_id.to_string(),
                    x: d.x,
                    y: d.y,
                    w: d.w,
                    h: d.h,
                    score: d.score,
                    class: d.class,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl StageSummary {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let pick = |q: f64| s[((q * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: pick(0.5),
            p95: pick(0.95),
            max: *s.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub warp_ms: StageSummary,
    pub mapping_ms: StageSummary,
    pub nms_ms: StageSummary,
    pub detections_per_frame: f64,
}

impl BenchReport {
    pub fn from_timings(timings: &[TimingReport], detections: usize) -> Self {
        let col = |f: fn(&TimingReport) -> f64| timings.iter().map(f).collect::<Vec<_>>();
        Self {
            frames: timings.len(),
            warp_ms: StageSummary::of(&col(|t| t.warp_ms)),
            mapping_ms: StageSummary::of(&col(|t| t.mapping_ms)),
            nms_ms: StageSummary::of(&col(|t| t.nms_ms)),
            detections_per_frame: detections as f64 / timings.len().max(1) as f64,
        }
    }
}
