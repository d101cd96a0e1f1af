//! Two-stage suppression: axis-aligned hard NMS per patch, then hard NMS,
//! Gaussian soft NMS or mean-shift box refinement on the fisheye boxes.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::boxmap::{FisheyeDetection, PatchDetection};
use crate::error::{Error, Result};
use crate::rotrect::{iou_axis_aligned, iou_rotated, BoxVec4, PolarBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Method {
    Hard,
    #[default]
    Gnms,
    Bbr,
}

impl std::str::FromStr for Stage2Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "gnms" | "gaussian" => Ok(Self::Gnms),
            "bbr" => Ok(Self::Bbr),
            other => Err(Error::Config(format!("unknown NMS method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsConfig {
    pub stage1: bool,
    pub stage1_iou: f64,
    pub method: Stage2Method,
    pub hard_iou: f64,
    pub a_g: f64,
    /// Kernel radius as a fraction of the fisheye image width.
    pub bbr_kernel_frac: f64,
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            stage1: true,
            stage1_iou: 0.8,
            method: Stage2Method::Gnms,
            hard_iou: 0.45,
            a_g: 0.2,
            bbr_kernel_frac: 0.04,
            score_floor: 0.001,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in (0, 1], got {v}")))
            }
        };
        unit("stage1_iou", self.stage1_iou)?;
        unit("hard_iou", self.hard_iou)?;
        unit("bbr_kernel_frac", self.bbr_kernel_frac)?;
        if !(self.a_g > 0.0) {
            return Err(Error::Config(format!("a_g must be positive, got {}", self.a_g)));
        }
        if !(self.score_floor >= 0.0) {
            return Err(Error::Config(format!("score_floor must be non-negative, got {}", self.score_floor)));
        }
        Ok(())
    }
}

/// Indices sorted by score descending; equal scores keep input order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    idx
}

/// Greedy hard NMS inside each patch on axis-aligned boxes.
pub fn stage1_nms(dets: &[PatchDetection], iou_thresh: f64) -> Vec<PatchDetection> {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut kept: Vec<PatchDetection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.patch != d.patch || iou_axis_aligned(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

/// Greedy hard NMS on polar boxes.
pub fn hard_nms_fisheye(dets: &[FisheyeDetection], iou_thresh: f64, origin: Point2<f64>) -> Vec<FisheyeDetection> {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut kept: Vec<FisheyeDetection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| iou_rotated(&k.bbox, &d.bbox, origin) < iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

/// Gaussian score decay. Output is in selection order; detections whose final
/// score falls below `score_floor` are dropped.
pub fn gaussian_soft_nms(dets: &[FisheyeDetection], a_g: f64, score_floor: f64, origin: Point2<f64>) -> Vec<FisheyeDetection> {
    let mut pool: Vec<FisheyeDetection> = dets.to_vec();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for (i, d) in pool.iter().enumerate().skip(1) {
            if d.score > pool[best].score {
                best = i;
            }
        }
        let chosen = pool.remove(best);
        for d in pool.iter_mut() {
            let iou = iou_rotated(&d.bbox, &chosen.bbox, origin);
            if iou > 0.0 {
                d.score *= (-iou * iou / a_g).exp();
            }
        }
        out.push(chosen);
    }
    out.retain(|d| d.score >= score_floor);
    out
}

const MEAN_SHIFT_TOL: f64 = 0.01;
const MEAN_SHIFT_MAX_ITER: usize = 100;

/// Mean-shift clustering of box centers with a flat kernel, then one
/// score-weighted box per cluster carrying the cluster's best score.
pub fn bbr(dets: &[FisheyeDetection], kernel_radius: f64) -> Vec<FisheyeDetection> {
    if dets.is_empty() {
        return Vec::new();
    }
    let centers: Vec<Point2<f64>> = dets.iter().map(|d| d.bbox.center()).collect();
    let r2 = kernel_radius * kernel_radius;
    let modes: Vec<Point2<f64>> = centers
        .iter()
        .map(|&start| {
            let mut m = start;
            for _ in 0..MEAN_SHIFT_MAX_ITER {
                let (mut sum, mut n) = (Vector2::zeros(), 0usize);
                for c in &centers {
                    if (c - m).norm_squared() <= r2 {
                        sum += c.coords;
                        n += 1;
                    }
                }
                let next = Point2::from(sum / n.max(1) as f64);
                let shift = (next - m).norm();
                m = next;
                if shift < MEAN_SHIFT_TOL {
                    break;
                }
            }
            m
        })
        .collect();

    // Group converged modes: a mode joins the nearest cluster representative
    // within the kernel radius. Combined boxes are then merged until no two
    // centers are within the radius, so a second pass leaves them alone.
    let mut reps: Vec<Point2<f64>> = Vec::new();
    let mut label = vec![0usize; dets.len()];
    for (i, m) in modes.iter().enumerate() {
        let nearest = reps
            .iter()
            .enumerate()
            .map(|(k, r)| (k, (r - m).norm_squared()))
            .filter(|&(_, d)| d <= r2)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        label[i] = match nearest {
            Some((k, _)) => k,
            None => {
                reps.push(*m);
                reps.len() - 1
            }
        };
    }
    let mut clusters = combine(dets, &label, reps.len());
    loop {
        let mut merged = false;
        'outer: for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                if (clusters[a].1.bbox.center() - clusters[b].1.bbox.center()).norm_squared() <= r2 {
                    let members_b = std::mem::take(&mut clusters[b].0);
                    clusters[a].0.extend(members_b);
                    clusters.remove(b);
                    let members = clusters[a].0.clone();
                    clusters[a].1 = combine_members(dets, &members);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    let mut out: Vec<FisheyeDetection> = clusters.into_iter().map(|c| c.1).collect();
    let order = score_order(out.iter().map(|d| d.score));
    out = order.into_iter().map(|i| out[i]).collect();
    out
}

fn combine(dets: &[FisheyeDetection], label: &[usize], n: usize) -> Vec<(Vec<usize>, FisheyeDetection)> {
    let mut members = vec![Vec::new(); n];
    for (i, &l) in label.iter().enumerate() {
        members[l].push(i);
    }
    members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let d = combine_members(dets, &m);
            (m, d)
        })
        .collect()
}

fn combine_members(dets: &[FisheyeDetection], members: &[usize]) -> FisheyeDetection {
    if members.len() == 1 {
        return dets[members[0]];
    }
    let total: f64 = members.iter().map(|&i| dets[i].score).sum();
    let best = members.iter().map(|&i| dets[i].score).fold(f64::MIN, f64::max);
    let mut v: BoxVec4 = [0.0; 4];
    if total > 0.0 {
        for &i in members {
            let w = dets[i].score / total;
            for (acc, x) in v.iter_mut().zip(dets[i].bbox.to_vec4()) {
                *acc += w * x;
            }
        }
    } else {
        for &i in members {
            for (acc, x) in v.iter_mut().zip(dets[i].bbox.to_vec4()) {
                *acc += x / members.len() as f64;
            }
        }
    }
    FisheyeDetection {
        bbox: PolarBox::from_vec4(v),
        score: best,
    }
}

/// Runs the configured fisheye-frame method.
pub fn stage2_nms(dets: &[FisheyeDetection], config: &NmsConfig, origin: Point2<f64>, image_width: usize) -> Vec<FisheyeDetection> {
    match config.method {
        Stage2Method::Hard => hard_nms_fisheye(dets, config.hard_iou, origin),
        Stage2Method::Gnms => gaussian_soft_nms(dets, config.a_g, config.score_floor, origin),
        Stage2Method::Bbr => bbr(dets, config.bbr_kernel_frac * image_width as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotrect::AxisBox;

    const O: Point2<f64> = Point2::new(500.0, 500.0);

    fn fd(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> FisheyeDetection {
        FisheyeDetection {
            bbox: PolarBox::new(cx, cy, w, h),
            score,
        }
    }

    fn pd(patch: usize, b: [f64; 4], score: f64) -> PatchDetection {
        PatchDetection {
            patch,
            bbox: AxisBox::new(b[0], b[1], b[2], b[3]),
            score,
        }
    }

    #[test]
    fn stage1_examples() {
        let b = [10.0, 10.0, 50.0, 90.0];
        let out = stage1_nms(&[pd(0, b, 0.8), pd(0, b, 0.9)], 0.8);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        // Same boxes in different patches do not interact.
        assert_eq!(stage1_nms(&[pd(0, b, 0.8), pd(1, b, 0.9)], 0.8).len(), 2);
        // IOU 0.7 pair survives a 0.8 threshold: 100x100 boxes shifted by 100*0.3/1.7.
        let s = 100.0 * 0.3 / 1.7;
        let pair = [pd(0, [0.0, 0.0, 100.0, 100.0], 0.9), pd(0, [s, 0.0, 100.0 + s, 100.0], 0.8)];
        assert!((iou_axis_aligned(&pair[0].bbox, &pair[1].bbox) - 0.7).abs() < 1e-12);
        assert_eq!(stage1_nms(&pair, 0.8).len(), 2);
        assert_eq!(stage1_nms(&pair[..1], 0.8), pair[..1].to_vec());
    }

    #[test]
    fn hard_examples() {
        let a = fd(700.0, 500.0, 20.0, 40.0, 0.7);
        let out = hard_nms_fisheye(&[a, fd(700.0, 500.0, 20.0, 40.0, 0.9)], 0.45, O);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert!(hard_nms_fisheye(&[], 0.45, O).is_empty());
        // Two equal boxes overlapping by half their length: IOU 1/3.
        let b = fd(710.0, 500.0, 20.0, 40.0, 0.6);
        let c = fd(730.0, 500.0, 20.0, 40.0, 0.5);
        assert!((iou_rotated(&b.bbox, &c.bbox, O) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(hard_nms_fisheye(&[b, c], 0.45, O).len(), 2);
    }

    #[test]
    fn gaussian_rescale_is_the_stated_formula() {
        let out = gaussian_soft_nms(&[fd(700.0, 500.0, 20.0, 40.0, 0.6), fd(700.0, 500.0, 20.0, 40.0, 0.9)], 0.2, 0.001, O);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.6 * (-1.0f64 / 0.2).exp());
        assert!((out[1].score - 0.00404).abs() < 1e-5);
        let far = [fd(700.0, 500.0, 20.0, 40.0, 0.6), fd(300.0, 500.0, 20.0, 40.0, 0.9)];
        let out = gaussian_soft_nms(&far, 0.2, 0.001, O);
        assert_eq!((out[0].score, out[1].score), (0.9, 0.6));
    }

    #[test]
    fn gaussian_with_tiny_strength_acts_like_hard_nms_at_zero() {
        let dets = [
            fd(700.0, 500.0, 20.0, 40.0, 0.9),
            fd(705.0, 500.0, 20.0, 40.0, 0.8),
            fd(741.0, 500.0, 20.0, 40.0, 0.7),
            fd(720.0, 500.0, 20.0, 40.0, 0.65),
            fd(500.0, 700.0, 20.0, 40.0, 0.6),
        ];
        let out = gaussian_soft_nms(&dets, 1e-6, 0.001, O);
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7, 0.6]);
        for d in &out {
            let orig = dets.iter().find(|o| o.bbox == d.bbox).unwrap();
            assert!(d.score <= orig.score);
        }
    }

    #[test]
    fn bbr_examples() {
        let out = bbr(&[fd(700.0, 500.0, 20.0, 40.0, 0.9), fd(700.0, 500.0, 20.0, 40.0, 0.6)], 40.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[0].bbox, PolarBox::new(700.0, 500.0, 20.0, 40.0));

        let apart = [fd(700.0, 500.0, 20.0, 40.0, 0.9), fd(800.0, 500.0, 22.0, 30.0, 0.6)];
        assert_eq!(bbr(&apart, 40.0), apart.to_vec());

        let three = [
            fd(700.0, 500.0, 20.0, 40.0, 0.5),
            fd(710.0, 505.0, 24.0, 44.0, 0.3),
            fd(705.0, 495.0, 18.0, 36.0, 0.2),
        ];
        let out = bbr(&three, 40.0);
        assert_eq!(out.len(), 1);
        let want: Vec<f64> = (0..4)
            .map(|k| three.iter().map(|d| d.score * d.bbox.to_vec4()[k]).sum::<f64>() / three.iter().map(|d| d.score).sum::<f64>())
            .collect();
        for (g, w) in out[0].bbox.to_vec4().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert_eq!(out[0].score, 0.5);
    }

    #[test]
    fn hard_and_bbr_are_idempotent() {
        let dets: Vec<_> = (0..30)
            .map(|i| {
                let a = i as f64 * 0.7;
                let r = 100.0 + 9.0 * i as f64;
                fd(500.0 + r * a.cos(), 500.0 + r * a.sin(), 20.0 + i as f64, 40.0, 0.3 + 0.02 * i as f64)
            })
            .collect();
        let h = hard_nms_fisheye(&dets, 0.45, O);
        assert_eq!(hard_nms_fisheye(&h, 0.45, O), h);
        let b = bbr(&dets, 40.0);
        assert_eq!(bbr(&b, 40.0), b);
    }

    #[test]
    fn config_parsing_and_validation() {
        assert_eq!("gnms".parse::<Stage2Method>().unwrap(), Stage2Method::Gnms);
        assert!("soft".parse::<Stage2Method>().is_err());
        assert!(NmsConfig::default().validate().is_ok());
        let bad = NmsConfig {
            a_g: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
    }
}
