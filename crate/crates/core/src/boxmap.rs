//! Mapping of patch-frame detections to polar boxes in the fisheye frame by
//! weighted averaging over the best-overlapping exemplars.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exemplars::{ExemplarSet, MappingExemplar};
use crate::geometry::{FisheyeCamera, PatchProjector};
use crate::person_model::enclosing_polar_box;
use crate::rotrect::{iou_axis_aligned, AxisBox, BoxVec4, PolarBox};

/// A detection in one patch, box in patch pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDetection {
    pub patch: usize,
    pub bbox: AxisBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisheyeDetection {
    pub bbox: PolarBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExemplarMatch {
    pub index: usize,
    pub overlap: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    None,
    Containment,
    Overlap,
    #[default]
    Both,
}

impl std::str::FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "containment" => Ok(Self::Containment),
            "overlap" => Ok(Self::Overlap),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown scaling mode {other:?}"))),
        }
    }
}

/// Exemplar set with its reference boxes ordered by left edge, so an overlap
/// query only scans boxes starting left of the query's right edge.
#[derive(Debug, Clone)]
pub struct IndexedExemplars {
    pub set: ExemplarSet,
    by_x0: Vec<(AxisBox, u32)>,
}

impl IndexedExemplars {
    pub fn new(set: ExemplarSet) -> Self {
        let mut by_x0: Vec<(AxisBox, u32)> = set.exemplars.iter().enumerate().map(|(i, e)| (e.reference, i as u32)).collect();
        by_x0.sort_by(|a, b| a.0.x0.total_cmp(&b.0.x0).then(a.1.cmp(&b.1)));
        Self { set, by_x0 }
    }

    pub fn exemplars(&self) -> &[MappingExemplar] {
        &self.set.exemplars
    }

    /// Calls `f` once for every exemplar whose reference box intersects `q`.
    fn for_each_candidate(&self, q: &AxisBox, mut f: impl FnMut(usize)) {
        let end = self.by_x0.partition_point(|(r, _)| r.x0 < q.x1);
        for (r, i) in &self.by_x0[..end] {
            if r.x1 > q.x0 && r.y0 < q.y1 && r.y1 > q.y0 {
                f(*i as usize);
            }
        }
    }
}

/// Detection box in relative patch coordinates.
pub fn to_relative(b: &AxisBox, patch_w: usize, patch_h: usize) -> AxisBox {
    b.scale(1.0 / patch_w as f64, 1.0 / patch_h as f64)
}

/// Top `k_r` exemplars by IOU with `rel_box` (relative coordinates). Exemplars
/// without overlap never enter; ties go to the lower index.
pub fn select_exemplars(rel_box: &AxisBox, set: &IndexedExemplars, k_r: usize) -> Vec<ExemplarMatch> {
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    // Kept sorted by rank; holds at most k_r entries.
    let mut hits: Vec<(f64, usize)> = Vec::with_capacity(k_r + 1);
    set.for_each_candidate(rel_box, |i| {
        let iou = iou_axis_aligned(rel_box, &set.set.exemplars[i].reference);
        if iou <= 0.0 {
            return;
        }
        let cand = (iou, i);
        if hits.len() == k_r && by_rank(&cand, &hits[k_r - 1]) != std::cmp::Ordering::Less {
            return;
        }
        let at = hits.partition_point(|h| by_rank(h, &cand) == std::cmp::Ordering::Less);
        hits.insert(at, cand);
        hits.truncate(k_r);
    });
    let total: f64 = hits.iter().map(|h| h.0).sum();
    hits.into_iter()
        .map(|(overlap, index)| ExemplarMatch {
            index,
            overlap,
            weight: overlap / total,
        })
        .collect()
}

/// Weighted average of the matched target boxes.
pub fn map_box(matches: &[ExemplarMatch], exemplars: &[MappingExemplar]) -> Result<PolarBox> {
    if matches.is_empty() {
        return Err(Error::Domain("no exemplar matches to average".into()));
    }
    let mut v: BoxVec4 = [0.0; 4];
    for m in matches {
        let t = exemplars[m.index].target.to_vec4();
        for (acc, x) in v.iter_mut().zip(t) {
            *acc += m.weight * x;
        }
    }
    Ok(PolarBox::from_vec4(v))
}

pub fn scale_confidence(score: f64, matches: &[ExemplarMatch], exemplars: &[MappingExemplar], mode: ScalingMode) -> f64 {
    let fc: f64 = matches.iter().map(|m| m.weight * exemplars[m.index].containment).sum();
    let fov: f64 = matches.iter().map(|m| m.weight * m.overlap).sum();
    match mode {
        ScalingMode::None => score,
        ScalingMode::Containment => score * fc,
        ScalingMode::Overlap => score * fov,
        ScalingMode::Both => score * fc * fov,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MapStats {
    pub mapped: usize,
    pub unmappable: usize,
}

/// Maps one detection; `None` when no exemplar overlaps it.
pub fn map_detection(det: &PatchDetection, set: &IndexedExemplars, k_r: usize, mode: ScalingMode) -> Option<FisheyeDetection> {
    let spec = &set.set.spec;
    let rel = to_relative(&det.bbox, spec.width_px, spec.height_px);
    let matches = select_exemplars(&rel, set, k_r);
    if matches.is_empty() {
        return None;
    }
    let bbox = map_box(&matches, set.exemplars()).ok()?;
    Some(FisheyeDetection {
        bbox,
        score: scale_confidence(det.score, &matches, set.exemplars(), mode),
    })
}

/// Maps detections against per-patch exemplar sets, dropping the unmappable ones.
pub fn map_detections(
    dets: &[PatchDetection],
    sets: &[IndexedExemplars],
    k_r: usize,
    mode: ScalingMode,
) -> Result<(Vec<FisheyeDetection>, MapStats)> {
    let mut out = Vec::with_capacity(dets.len());
    let mut stats = MapStats::default();
    for d in dets {
        let set = sets.get(d.patch).ok_or_else(|| Error::Data(format!("detection in unknown patch {}", d.patch)))?;
        match map_detection(d, set, k_r, mode) {
            Some(f) => {
                out.push(f);
                stats.mapped += 1;
            }
            None => stats.unmappable += 1,
        }
    }
    Ok((out, stats))
}

/// Baseline mapping: warp the boundary of the patch box into the fisheye image
/// and take the enclosing polar box of the warped outline.
pub fn warped_footprint_box(det: &PatchDetection, proj: &PatchProjector, cam: &FisheyeCamera) -> Option<PolarBox> {
    const PER_EDGE: usize = 32;
    let spec = &proj.spec;
    let b = &det.bbox;
    let mut pts: Vec<Point2<f64>> = Vec::with_capacity(4 * PER_EDGE);
    for s in 0..PER_EDGE {
        let t = s as f64 / PER_EDGE as f64;
        for (u, v) in [
            (b.x0 + t * b.width(), b.y0),
            (b.x1, b.y0 + t * b.height()),
            (b.x1 - t * b.width(), b.y1),
            (b.x0, b.y1 - t * b.height()),
        ] {
            let (xp, yp) = spec.px_to_rel(u, v);
            let (x, y, _) = cam.project_unchecked(&proj.pixel_to_ray(xp, yp));
            pts.push(Point2::new(x, y));
        }
    }
    enclosing_polar_box(&pts, cam.center())
}
