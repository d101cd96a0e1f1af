//! Per-patch mapping exemplars: target boxes in the fisheye frame paired with
//! the reference boxes they produce in a patch, plus a containment ratio.
//!
//! The reference box of a target is found by sampling the ellipse inscribed in
//! the target box on a lattice aligned with the box axes (pitch of one pixel,
//! coarsened so an ellipse never uses more than `max_samples` points), mapping
//! each sample into the patch, and taking the bounding rectangle of the
//! samples that land inside it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositor::CompositeLayout;
use crate::error::{Error, Result};
use crate::geometry::{FisheyeCamera, PatchProjector, PatchSpec};
use crate::person_model::{generate_target_boxes, default_parameter_grid, ParameterSet, TargetBoxSet, TargetSampling};
use crate::rotrect::{AxisBox, PolarBox, PolarBoxJson};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingExemplar {
    pub target: PolarBox,
    /// Reference box in relative patch coordinates, `[0, 1]` on both axes.
    pub reference: AxisBox,
    pub containment: f64,
}

#[derive(Debug, Clone)]
pub struct ExemplarSet {
    pub patch_index: usize,
    pub spec: PatchSpec,
    pub exemplars: Vec<MappingExemplar>,
}

impl ExemplarSet {
    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExemplarConfig {
    pub parameter_grid: Vec<ParameterSet>,
    pub sampling: TargetSampling,
    pub min_containment: f64,
    pub min_target_height: f64,
    pub max_samples: usize,
}

impl Default for ExemplarConfig {
    fn default() -> Self {
        Self {
            parameter_grid: default_parameter_grid(),
            sampling: TargetSampling::default(),
            min_containment: 0.1,
            min_target_height: 20.0,
            max_samples: 4096,
        }
    }
}

/// Result of mapping one target box into a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceOutcome {
    Accepted { reference: AxisBox, containment: f64 },
    Rejected { containment: f64 },
}

impl ReferenceOutcome {
    pub fn containment(&self) -> f64 {
        match *self {
            ReferenceOutcome::Accepted { containment, .. } | ReferenceOutcome::Rejected { containment } => containment,
        }
    }
}

/// Lattice pitch for an ellipse inscribed in a `w x h` box.
pub fn sample_pitch(w: f64, h: f64, max_samples: usize) -> f64 {
    (w * h / max_samples.max(1) as f64).sqrt().max(1.0)
}

/// Fisheye points of the lattice samples inside the ellipse inscribed in `target`.
pub fn ellipse_samples(target: &PolarBox, origin: nalgebra::Point2<f64>, max_samples: usize) -> Vec<nalgebra::Point2<f64>> {
    let (w, h) = (target.width, target.height);
    let s = sample_pitch(w, h, max_samples);
    let nu = (w / s).ceil().max(1.0) as usize;
    let nv = (h / s).ceil().max(1.0) as usize;
    let u_axis = target.radial_axis_or_default(origin);
    let t_axis = Vector2::new(-u_axis.y, u_axis.x);
    let c = target.center();
    let mut out = Vec::with_capacity(nu * nv);
    for iv in 0..nv {
        let v = (iv as f64 + 0.5 - nv as f64 / 2.0) * s;
        let ev = 2.0 * v / h;
        for iu in 0..nu {
            let u = (iu as f64 + 0.5 - nu as f64 / 2.0) * s;
            let eu = 2.0 * u / w;
            if eu * eu + ev * ev <= 1.0 {
                out.push(c + u_axis * v + t_axis * u);
            }
        }
    }
    if out.is_empty() {
        out.push(c);
    }
    out
}

/// Maps the ellipse of `target` into the patch and derives its reference box and
/// containment ratio. Targets below `min_containment` are rejected.
pub fn build_reference_box(
    target: &PolarBox,
    proj: &PatchProjector,
    cam: &FisheyeCamera,
    min_containment: f64,
    max_samples: usize,
) -> ReferenceOutcome {
    let origin = cam.center();
    // Quick reject: the whole box lies outside the cone of rays the patch can see.
    let center_ray = cam.ray_unchecked(target.center_x, target.center_y);
    let off_axis = center_ray.dot(&proj.frame.z_axis).clamp(-1.0, 1.0).acos();
    let box_angle = target.circumradius() * cam.max_angle / cam.radius;
    if off_axis > proj.half_cone_angle() + box_angle + 1e-6 {
        return ReferenceOutcome::Rejected { containment: 0.0 };
    }

    let samples = ellipse_samples(target, origin, max_samples);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    let mut kept = 0usize;
    for p in &samples {
        if !cam.contains(p.x, p.y) {
            continue;
        }
        if let Some((xp, yp)) = proj.ray_to_pixel(&cam.ray_unchecked(p.x, p.y)).inside() {
            let (u, v) = (0.5 * (xp + 1.0), 0.5 * (yp + 1.0));
            x0 = x0.min(u);
            y0 = y0.min(v);
            x1 = x1.max(u);
            y1 = y1.max(v);
            kept += 1;
        }
    }
    let containment = kept as f64 / samples.len() as f64;
    if kept == 0 || containment < min_containment {
        return ReferenceOutcome::Rejected { containment };
    }
    ReferenceOutcome::Accepted {
        reference: AxisBox::new(x0, y0, x1, y1),
        containment,
    }
}

/// Builds the exemplar set of one patch from pre-generated target boxes.
pub fn build_exemplar_set(
    patch_index: usize,
    spec: &PatchSpec,
    targets: &[TargetBoxSet],
    cam: &FisheyeCamera,
    config: &ExemplarConfig,
) -> Result<ExemplarSet> {
    let proj = PatchProjector::new(spec)?;
    let all: Vec<&PolarBox> = targets.iter().flat_map(|t| t.boxes.iter()).collect();
    let exemplars = all
        .par_iter()
        .filter(|t| t.height >= config.min_target_height)
        .filter_map(|t| match build_reference_box(t, &proj, cam, config.min_containment, config.max_samples) {
            ReferenceOutcome::Accepted { reference, containment } => Some(MappingExemplar {
                target: **t,
                reference,
                containment,
            }),
            ReferenceOutcome::Rejected { .. } => None,
        })
        .collect();
    Ok(ExemplarSet {
        patch_index,
        spec: *spec,
        exemplars,
    })
}

/// Exemplar sets for every patch of one composite layout.
#[derive(Debug, Clone)]
pub struct ExemplarBank {
    pub config_hash: String,
    pub sets: Vec<ExemplarSet>,
}

/// Identifies the camera, layout and exemplar parameters a bank was built for.
pub fn config_hash(cam: &FisheyeCamera, layout: &CompositeLayout, config: &ExemplarConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        camera: &'a FisheyeCamera,
        layout: &'a CompositeLayout,
        exemplars: &'a ExemplarConfig,
    }
    let json = serde_json::to_vec(&Key {
        camera: cam,
        layout,
        exemplars: config,
    })
    .expect("serializable");
    let digest = Sha256::digest(&json);
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

pub fn generate_all_targets(cam: &FisheyeCamera, config: &ExemplarConfig) -> Result<Vec<TargetBoxSet>> {
    config
        .parameter_grid
        .par_iter()
        .map(|p| generate_target_boxes(p, cam, &config.sampling))
        .collect()
}

impl ExemplarBank {
    pub fn build(layout: &CompositeLayout, cam: &FisheyeCamera, config: &ExemplarConfig) -> Result<Self> {
        let targets = generate_all_targets(cam, config)?;
        Self::build_from_targets(layout, cam, config, &targets)
    }

    pub fn build_from_targets(
        layout: &CompositeLayout,
        cam: &FisheyeCamera,
        config: &ExemplarConfig,
        targets: &[TargetBoxSet],
    ) -> Result<Self> {
        layout.validate()?;
        let sets = (0..layout.n_patches)
            .map(|k| build_exemplar_set(k, &layout.patch_spec(k), targets, cam, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config_hash: config_hash(cam, layout, config),
            sets,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: 1,
            config_hash: self.config_hash.clone(),
            specs: self.sets.iter().map(|s| s.spec).collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for set in &self.sets {
            for e in &set.exemplars {
                let line = CacheLine {
                    patch: set.patch_index,
                    target: PolarBoxJson {
                        cx: e.target.center_x,
                        cy: e.target.center_y,
                        w: e.target.width,
                        h: e.target.height,
                        angle_rad: None,
                    },
                    reference: [e.reference.x0, e.reference.y0, e.reference.x1, e.reference.y1],
                    fc: e.containment,
                };
                serde_json::to_writer(&mut w, &line)?;
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Loads a cache, rejecting it unless it was built for `expected_hash`.
    pub fn load(path: impl AsRef<Path>, expected_hash: &str) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let first = lines.next().ok_or_else(|| parse_err(1, "empty exemplar cache".into()))??;
        let header: CacheHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        if header.format != CACHE_FORMAT {
            return Err(parse_err(1, format!("unexpected format {:?}", header.format)));
        }
        if header.config_hash != expected_hash {
            return Err(Error::CacheMismatch {
                path: path.to_path_buf(),
                found: header.config_hash,
                expected: expected_hash.to_string(),
            });
        }
        let mut sets: Vec<ExemplarSet> = header
            .specs
            .iter()
            .enumerate()
            .map(|(k, s)| ExemplarSet {
                patch_index: k,
                spec: *s,
                exemplars: Vec::new(),
            })
            .collect();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheLine = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            let set = sets
                .get_mut(rec.patch)
                .ok_or_else(|| parse_err(i + 2, format!("patch index {} out of range", rec.patch)))?;
            let [x0, y0, x1, y1] = rec.reference;
            set.exemplars.push(MappingExemplar {
                target: rec.target.into(),
                reference: AxisBox::new(x0, y0, x1, y1),
                containment: rec.fc,
            });
        }
        Ok(Self {
            config_hash: header.config_hash,
            sets,
        })
    }
}

const CACHE_FORMAT: &str = "fpw-exemplars";

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    config_hash: String,
    specs: Vec<PatchSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    patch: usize,
    target: PolarBoxJson,
    reference: [f64; 4],
    fc: f64,
}
