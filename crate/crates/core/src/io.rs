//! JSON-lines files exchanged with detectors and the evaluator.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Point2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::boxmap::{FisheyeDetection, PatchDetection};
use crate::compositor::{composite_box_to_patch, CompositeLayout};
use crate::error::{Error, Result};
use crate::evaluation::{GroundTruth, GroundTruthJson};
use crate::rotrect::{AxisBox, PolarBox};

/// Detector output on one composite, box in composite pixels (top-left + size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeDetection {
    pub composite_id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    #[serde(default = "default_class")]
    pub class: String,
}

fn default_class() -> String {
    "person".into()
}

/// Fisheye-frame detection record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FisheyeDetectionRecord<'a> {
    pub image_id: &'a str,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle_rad: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct FisheyeDetectionOwned {
    image_id: String,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    score: f64,
}

/// Composite id for composite `k` of frame `stem`.
pub fn composite_id(stem: &str, k: usize) -> String {
    format!("{stem}_c{k}")
}

/// Splits `<stem>_c<k>` into the frame stem and composite index.
pub fn parse_composite_id(id: &str) -> Option<(&str, usize)> {
    let (stem, k) = id.rsplit_once("_c")?;
    Some((stem, k.parse().ok()?))
}

/// Reads JSON lines, reporting the 1-based line number of malformed records.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes JSON lines through a temporary file renamed into place.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: impl IntoIterator<Item = T>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for item in items {
            serde_json::to_writer(&mut w, &item)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Keeps person detections at or above `score_threshold`, assigns each to the
/// patch holding its center and crops it there. The result is sorted into a
/// canonical order so downstream steps do not depend on input line order.
pub fn ingest_composite(
    dets: &[CompositeDetection],
    layout: &CompositeLayout,
    person_class: &str,
    score_threshold: f64,
) -> Result<Vec<PatchDetection>> {
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        if d.class != person_class || d.score < score_threshold {
            continue;
        }
        if !(d.w > 0.0 && d.h > 0.0) || !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Data(format!("invalid detection {d:?}")));
        }
        let (patch, bbox) = composite_box_to_patch(&AxisBox::from_xywh(d.x, d.y, d.w, d.h), layout)?;
        out.push(PatchDetection {
            patch,
            bbox,
            score: d.score,
        });
    }
    sort_canonical(&mut out);
    Ok(out)
}

pub fn sort_canonical(dets: &mut [PatchDetection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.patch.cmp(&b.patch))
            .then(a.bbox.x0.total_cmp(&b.bbox.x0))
            .then(a.bbox.y0.total_cmp(&b.bbox.y0))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
    });
}

/// Composite-frame record of a patch detection.
pub fn to_composite(d: &PatchDetection, layout: &CompositeLayout, id: &str) -> CompositeDetection {
    let (ox, oy) = layout.cell_origin(d.patch);
    CompositeDetection {
        composite_id: id.to_string(),
        x: d.bbox.x0 + ox as f64,
        y: d.bbox.y0 + oy as f64,
        w: d.bbox.width(),
        h: d.bbox.height(),
        score: d.score,
        class: default_class(),
    }
}

/// Groups composite detections by frame stem and composite index.
pub fn group_by_composite(dets: Vec<CompositeDetection>) -> Result<BTreeMap<String, BTreeMap<usize, Vec<CompositeDetection>>>> {
    let mut out: BTreeMap<String, BTreeMap<usize, Vec<CompositeDetection>>> = BTreeMap::new();
    for d in dets {
        let (stem, k) = parse_composite_id(&d.composite_id)
            .ok_or_else(|| Error::Data(format!("composite id {:?} is not of the form <stem>_c<k>", d.composite_id)))?;
        let stem = stem.to_string();
        out.entry(stem).or_default().entry(k).or_default().push(d);
    }
    Ok(out)
}

pub fn fisheye_records<'a>(image_id: &'a str, dets: &[FisheyeDetection], origin: Point2<f64>) -> Vec<FisheyeDetectionRecord<'a>> {
    dets.iter()
        .map(|d| FisheyeDetectionRecord {
            image_id,
            cx: d.bbox.center_x,
            cy: d.bbox.center_y,
            w: d.bbox.width,
            h: d.bbox.height,
            angle_rad: d.bbox.angle(origin),
            score: d.score,
        })
        .collect()
}

/// Reads fisheye detections grouped by image id.
pub fn read_fisheye_detections(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<FisheyeDetection>>> {
    let recs: Vec<FisheyeDetectionOwned> = read_jsonl(path)?;
    let mut out: BTreeMap<String, Vec<FisheyeDetection>> = BTreeMap::new();
    for r in recs {
        out.entry(r.image_id).or_default().push(FisheyeDetection {
            bbox: PolarBox::new(r.cx, r.cy, r.w, r.h),
            score: r.score,
        });
    }
    Ok(out)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let recs: Vec<GroundTruthJson> = read_jsonl(path)?;
    Ok(recs.into_iter().map(GroundTruth::from).collect())
}

pub fn write_ground_truth(path: impl AsRef<Path>, gt: &[GroundTruth]) -> Result<()> {
    write_jsonl(path, gt.iter().map(GroundTruthJson::from))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_ids() {
        assert_eq!(composite_id("frame_001", 1), "frame_001_c1");
        assert_eq!(parse_composite_id("frame_c0_c1"), Some(("frame_c0", 1)));
        assert_eq!(parse_composite_id("frame"), None);
        assert_eq!(parse_composite_id("frame_cx"), None);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"composite_id\":\"a_c0\",\"x\":1,\"y\":2,\"w\":3,\"h\":4,\"score\":0.5}\n\n{\"composite_id\":\"a_c0\",\"x\":1}\n",
        )
        .unwrap();
        match read_jsonl::<CompositeDetection>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ingest_filters_and_orders() {
        let layout = CompositeLayout::default();
        let mk = |x: f64, score: f64, class: &str| CompositeDetection {
            composite_id: "f_c0".into(),
            x,
            y: 10.0,
            w: 40.0,
            h: 80.0,
            score,
            class: class.into(),
        };
        let dets = vec![mk(10.0, 0.3, "person"), mk(200.0, 0.9, "person"), mk(50.0, 0.04, "person"), mk(60.0, 0.9, "chair")];
        let out = ingest_composite(&dets, &layout, "person", 0.05).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].patch, out[0].score), (1, 0.9));
        assert_eq!(out[0].bbox, AxisBox::from_xywh(48.0, 10.0, 40.0, 80.0));
        let mut rev = dets.clone();
        rev.reverse();
        assert_eq!(ingest_composite(&rev, &layout, "person", 0.05).unwrap(), out);
        let back = to_composite(&out[0], &layout, "f_c0");
        assert_eq!((back.x, back.y, back.w, back.h), (200.0, 10.0, 40.0, 80.0));
    }
}
