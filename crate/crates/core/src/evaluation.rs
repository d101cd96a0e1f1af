//! Detection matching against rotated ground truth, average precision and
//! log-average miss rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::boxmap::FisheyeDetection;
use crate::error::{Error, Result};
use crate::rotrect::{iou_rotated, PolarBox};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub boxes: Vec<PolarBox>,
}

/// One GT box as stored on disk: either a polar box or an axis-aligned box
/// given by its top-left corner, which is converted to an orientation-free
/// square of equal area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GtBoxJson {
    Polar { cx: f64, cy: f64, w: f64, h: f64 },
    Axis { x: f64, y: f64, w: f64, h: f64 },
}

impl From<GtBoxJson> for PolarBox {
    fn from(b: GtBoxJson) -> Self {
        match b {
            GtBoxJson::Polar { cx, cy, w, h } => PolarBox::new(cx, cy, w, h),
            GtBoxJson::Axis { x, y, w, h } => {
                let side = (w * h).sqrt();
                PolarBox::new(x + w / 2.0, y + h / 2.0, side, side)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthJson {
    pub image_id: String,
    pub boxes: Vec<GtBoxJson>,
}

impl From<GroundTruthJson> for GroundTruth {
    fn from(g: GroundTruthJson) -> Self {
        Self {
            image_id: g.image_id,
            boxes: g.boxes.into_iter().map(PolarBox::from).collect(),
        }
    }
}

impl From<&GroundTruth> for GroundTruthJson {
    fn from(g: &GroundTruth) -> Self {
        Self {
            image_id: g.image_id.clone(),
            boxes: g
                .boxes
                .iter()
                .map(|b| GtBoxJson::Polar {
                    cx: b.center_x,
                    cy: b.center_y,
                    w: b.width,
                    h: b.height,
                })
                .collect(),
        }
    }
}

/// A scored detection with its match outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Labeled {
    pub score: f64,
    pub tp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// Labels in descending score order.
    pub labels: Vec<Labeled>,
    /// GT index matched by each label, `None` for false positives.
    pub matched_gt: Vec<Option<usize>>,
    pub n_gt: usize,
}

/// Matches one image: detections by descending score (ties keep input order)
/// each claim the unmatched GT box with the highest IOU at or above the threshold.
pub fn match_detections(dets: &[FisheyeDetection], gt: &[PolarBox], origin: Point2<f64>, iou_thresh: f64) -> ImageMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gt.len()];
    let mut labels = Vec::with_capacity(dets.len());
    let mut matched_gt = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = iou_rotated(&d.bbox, b, origin);
            if iou >= iou_thresh && best.is_none_or(|(_, v)| iou > v) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        labels.push(Labeled {
            score: d.score,
            tp: best.is_some(),
        });
        matched_gt.push(best.map(|b| b.0));
    }
    ImageMatch {
        labels,
        matched_gt,
        n_gt: gt.len(),
    }
}

/// Cumulative (tp, fp) at each distinct score threshold, highest first.
/// Detections with equal scores enter together.
pub fn threshold_counts(labels: &[Labeled]) -> Vec<(f64, usize, usize)> {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, l) in sorted.iter().enumerate() {
        if l.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == sorted.len() || sorted[i + 1].score != l.score {
            out.push((l.score, tp, fp));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LamrMean {
    #[default]
    Arithmetic,
    Geometric,
}

/// Precision/recall at every threshold, highest threshold first.
pub fn pr_curve(labels: &[Labeled], n_gt: usize) -> Result<Vec<(f64, f64)>> {
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(threshold_counts(labels)
        .into_iter()
        .map(|(_, tp, fp)| (tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

pub fn average_precision(labels: &[Labeled], n_gt: usize, method: ApMethod) -> Result<f64> {
    let pr = pr_curve(labels, n_gt)?;
    if pr.is_empty() {
        return Ok(0.0);
    }
    Ok(match method {
        ApMethod::AllPoint => {
            let mut envelope = vec![0.0; pr.len()];
            let mut best = 0.0f64;
            for i in (0..pr.len()).rev() {
                best = best.max(pr[i].1);
                envelope[i] = best;
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (i, &(r, _)) in pr.iter().enumerate() {
                ap += (r - prev_r) * envelope[i];
                prev_r = r;
            }
            ap
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    pr.iter().filter(|p| p.0 >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Miss rate against false positives per image, starting from the empty
/// operating point `(0, 1)`.
pub fn mr_fppi_curve(labels: &[Labeled], n_images: usize, n_gt: usize) -> Result<Vec<(f64, f64)>> {
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    if n_images == 0 {
        return Err(Error::Data("no images to evaluate".into()));
    }
    let mut out = vec![(0.0, 1.0)];
    out.extend(
        threshold_counts(labels)
            .into_iter()
            .map(|(_, tp, fp)| (fp as f64 / n_images as f64, 1.0 - tp as f64 / n_gt as f64)),
    );
    Ok(out)
}

pub const LAMR_SAMPLES: usize = 10;

pub fn lamr_samples() -> [f64; LAMR_SAMPLES] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (LAMR_SAMPLES - 1) as f64))
}

pub fn lamr(labels: &[Labeled], n_images: usize, n_gt: usize, mean: LamrMean) -> Result<f64> {
    let curve = mr_fppi_curve(labels, n_images, n_gt)?;
    let rates: Vec<f64> = lamr_samples()
        .iter()
        .map(|&f| {
            curve
                .iter()
                .filter(|p| p.0 <= f)
                .map(|p| p.1)
                .fold(1.0, f64::min)
        })
        .collect();
    Ok(match mean {
        LamrMean::Arithmetic => rates.iter().sum::<f64>() / rates.len() as f64,
        LamrMean::Geometric => (rates.iter().map(|r| r.max(1e-12).ln()).sum::<f64>() / rates.len() as f64).exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub ap_method: ApMethod,
    pub lamr_mean: LamrMean,
    /// Score threshold at which TP/FP/FN counts are reported.
    pub report_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            ap_method: ApMethod::AllPoint,
            lamr_mean: LamrMean::Arithmetic,
            report_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub lamr: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pr_curve: Vec<(f64, f64)>,
    pub mr_fppi_curve: Vec<(f64, f64)>,
}

/// Evaluates detections keyed by image id against every GT image. Detections
/// for images without GT are ignored.
pub fn evaluate(
    dets: &BTreeMap<String, Vec<FisheyeDetection>>,
    gt: &[GroundTruth],
    origin: Point2<f64>,
    config: &EvalConfig,
) -> Result<EvalResult> {
    let mut labels = Vec::new();
    let mut n_gt = 0;
    for g in gt {
        let d = dets.get(&g.image_id).map(Vec::as_slice).unwrap_or(&[]);
        let m = match_detections(d, &g.boxes, origin, config.iou_thresh);
        n_gt += m.n_gt;
        labels.extend(m.labels);
    }
    let ap = average_precision(&labels, n_gt, config.ap_method)?;
    let lamr = lamr(&labels, gt.len(), n_gt, config.lamr_mean)?;
    let tp = labels.iter().filter(|l| l.tp && l.score >= config.report_threshold).count();
    let fp = labels.iter().filter(|l| !l.tp && l.score >= config.report_threshold).count();
    Ok(EvalResult {
        ap,
        lamr,
        n_images: gt.len(),
        n_gt,
        n_detections: labels.len(),
        tp,
        fp,
        fn_: n_gt - tp,
        pr_curve: pr_curve(&labels, n_gt)?,
        mr_fppi_curve: mr_fppi_curve(&labels, gt.len(), n_gt)?,
    })
}

/// Mean of several runs' AP and LAMR, as used for two-composite reporting.
pub fn average_runs(results: &[EvalResult]) -> Option<(f64, f64)> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    Some((
        results.iter().map(|r| r.ap).sum::<f64>() / n,
        results.iter().map(|r| r.lamr).sum::<f64>() / n,
    ))
}

/// Minimal SVG line plot of a curve with both axes in `[0, 1]` unless `log_x`.
pub fn curve_svg(points: &[(f64, f64)], title: &str, x_label: &str, y_label: &str, log_x: bool) -> String {
    const W: f64 = 400.0;
    const H: f64 = 300.0;
    const M: f64 = 40.0;
    let sx = |x: f64| {
        let t = if log_x { (x.max(1e-3).log10() + 3.0) / 3.0 } else { x };
        M + t.clamp(0.0, 1.0) * (W - 2.0 * M)
    };
    let sy = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut path = String::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        let _ = write!(path, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(y));
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\
<rect x=\"{M}\" y=\"{M}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>\
<path d=\"{path}\" fill=\"none\" stroke=\"#c33\" stroke-width=\"1.5\"/>\
<text x=\"{tx}\" y=\"20\" text-anchor=\"middle\">{title}</text>\
<text x=\"{tx}\" y=\"{by}\" text-anchor=\"middle\">{x_label}</text>\
<text x=\"12\" y=\"{ty}\" transform=\"rotate(-90 12 {ty})\" text-anchor=\"middle\">{y_label}</text></svg>\n",
        pw = W - 2.0 * M,
        ph = H - 2.0 * M,
        tx = W / 2.0,
        by = H - 8.0,
        ty = H / 2.0,
        path = path.trim_end(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const O: Point2<f64> = Point2::new(500.0, 500.0);

    fn l(score: f64, tp: bool) -> Labeled {
        Labeled { score, tp }
    }

    fn det(b: PolarBox, score: f64) -> FisheyeDetection {
        FisheyeDetection { bbox: b, score }
    }

    #[test]
    fn hand_computed_ap() {
        let labels = [l(0.9, true), l(0.8, false), l(0.7, true)];
        let ap = average_precision(&labels, 2, ApMethod::AllPoint).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        // 11-point: recall <= 0.5 sees precision 1, above sees 2/3.
        let ap11 = average_precision(&labels, 2, ApMethod::ElevenPoint).unwrap();
        assert!((ap11 - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let gt = vec![PolarBox::new(700.0, 500.0, 20.0, 40.0), PolarBox::new(500.0, 300.0, 20.0, 40.0)];
        let dets: Vec<_> = gt.iter().map(|b| det(*b, 1.0)).collect();
        let m = match_detections(&dets, &gt, O, 0.5);
        assert!(m.labels.iter().all(|x| x.tp));
        assert_eq!(average_precision(&m.labels, 2, ApMethod::AllPoint).unwrap(), 1.0);
        assert_eq!(lamr(&m.labels, 1, 2, LamrMean::Arithmetic).unwrap(), 0.0);
        assert_eq!(average_precision(&[], 2, ApMethod::AllPoint).unwrap(), 0.0);
        assert_eq!(lamr(&[], 1, 2, LamrMean::Arithmetic).unwrap(), 1.0);
        assert!(matches!(average_precision(&[], 0, ApMethod::AllPoint), Err(Error::NoGroundTruth)));
        assert!(matches!(lamr(&[], 1, 0, LamrMean::Arithmetic), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn matching_rules() {
        let g1 = PolarBox::new(700.0, 500.0, 20.0, 40.0);
        let g2 = PolarBox::new(720.0, 500.0, 20.0, 40.0);
        // Closer to g2 than to g1.
        let d = det(PolarBox::new(715.0, 500.0, 20.0, 40.0), 0.9);
        let m = match_detections(&[d], &[g1, g2], O, 0.3);
        assert_eq!(m.matched_gt, vec![Some(1)]);
        // Duplicate detection: one TP, one FP.
        let m = match_detections(&[det(g1, 0.9), det(g1, 0.8)], &[g1], O, 0.5);
        assert_eq!(m.labels.iter().map(|x| x.tp).collect::<Vec<_>>(), vec![true, false]);
    }

    #[test]
    fn tied_scores_enter_together() {
        let labels = [l(0.5, false), l(0.5, true)];
        assert_eq!(threshold_counts(&labels), vec![(0.5, 1, 1)]);
        let ap = average_precision(&labels, 1, ApMethod::AllPoint).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lamr_uses_ten_log_spaced_points() {
        let s = lamr_samples();
        assert!((s[0] - 0.01).abs() < 1e-15 && (s[9] - 1.0).abs() < 1e-15);
        for w in s.windows(2) {
            assert!((w[1] / w[0] - 10f64.powf(2.0 / 9.0)).abs() < 1e-12);
        }
        // 10 images, 4 GT: one TP then one FP (fppi 0.1), then a TP.
        let labels = [l(0.9, true), l(0.8, false), l(0.7, true)];
        let v = lamr(&labels, 10, 4, LamrMean::Arithmetic).unwrap();
        // Samples below 0.1 FPPI only reach the first TP.
        let below = s.iter().filter(|&&f| f < 0.1 - 1e-12).count() as f64;
        let want = (below * 0.75 + (10.0 - below) * 0.5) / 10.0;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn axis_aligned_gt_becomes_square() {
        let g: GroundTruthJson = serde_json::from_str(r#"{"image_id":"a","boxes":[{"x":10,"y":20,"w":4,"h":9},{"cx":1,"cy":2,"w":3,"h":4}]}"#).unwrap();
        let g = GroundTruth::from(g);
        assert_eq!(g.boxes[0], PolarBox::new(12.0, 24.5, 6.0, 6.0));
        assert_eq!(g.boxes[1], PolarBox::new(1.0, 2.0, 3.0, 4.0));
    }

    #[test]
    fn svg_is_well_formed() {
        let s = curve_svg(&[(0.0, 1.0), (0.5, 0.8), (1.0, 0.4)], "PR", "recall", "precision", false);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("M40.00,40.00"));
    }
}
