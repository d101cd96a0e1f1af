//! Pipeline configuration file. Angles are written in degrees; every field
//! has a default so a partial file (or `{}`) is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxmap::ScalingMode;
use crate::compositor::CompositeLayout;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::exemplars::ExemplarConfig;
use crate::geometry::FisheyeCamera;
use crate::nms::NmsConfig;

pub const CONFIG_ENV: &str = "FPW_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Circle center; defaults to the image center.
    pub center_x: Option<f64>,
    pub center_y: Option<f64>,
    pub radius: f64,
    pub max_angle_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 1000,
            height: 1000,
            center_x: None,
            center_y: None,
            radius: 500.0,
            max_angle_deg: 90.0,
        }
    }
}

impl CameraConfig {
    pub fn camera(&self) -> Result<FisheyeCamera> {
        FisheyeCamera::new(
            self.center_x.unwrap_or(self.width as f64 / 2.0),
            self.center_y.unwrap_or(self.height as f64 / 2.0),
            self.radius,
            self.max_angle_deg.to_radians(),
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub columns: usize,
    pub rows: usize,
    pub composite_size: usize,
    pub phi1_deg: f64,
    pub alpha_x_deg: f64,
    pub alpha_y_deg: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            columns: 4,
            rows: 2,
            composite_size: 608,
            phi1_deg: 36.0,
            alpha_x_deg: 48.0,
            alpha_y_deg: 96.0,
        }
    }
}

impl LayoutConfig {
    pub fn layout(&self, phi2_base_deg: f64) -> Result<CompositeLayout> {
        let mut l = CompositeLayout::grid(self.columns, self.rows, self.composite_size)?;
        l.phi1 = self.phi1_deg.to_radians();
        l.alpha_x = self.alpha_x_deg.to_radians();
        l.alpha_y = self.alpha_y_deg.to_radians();
        l.phi2_base = phi2_base_deg.to_radians();
        l.validate()?;
        Ok(l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub camera: CameraConfig,
    pub layout: LayoutConfig,
    /// Azimuth offsets of the composites, degrees. The first is the primary
    /// composite; the second is used for test-time augmentation.
    pub composite_offsets_deg: Vec<f64>,
    pub exemplars: ExemplarConfig,
    pub k_r: usize,
    pub scaling: ScalingMode,
    pub nms: NmsConfig,
    pub tta: bool,
    /// Detections below this score, or of another class, are dropped on ingest.
    pub score_threshold: f64,
    pub person_class: String,
    pub eval: crate::evaluation::EvalConfig,
    /// Minimum visible silhouette fraction for the synthetic perfect detector.
    pub perfect_min_visible: f64,
    /// Directory holding exemplar caches, one file per composite.
    pub exemplar_cache_dir: Option<PathBuf>,
    /// Build and store exemplars when the cache is missing or stale.
    pub build_missing_exemplars: bool,
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            camera: CameraConfig::default(),
            layout: LayoutConfig::default(),
            composite_offsets_deg: vec![0.0, 22.5],
            exemplars: ExemplarConfig::default(),
            k_r: 10,
            scaling: ScalingMode::Both,
            nms: NmsConfig::default(),
            tta: false,
            score_threshold: 0.05,
            person_class: "person".into(),
            eval: EvalConfig::default(),
            perfect_min_visible: 0.3,
            exemplar_cache_dir: None,
            build_missing_exemplars: true,
            workers: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config named by the environment, or the defaults.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::load(PathBuf::from(p)),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.camera()?;
        if self.composite_offsets_deg.is_empty() {
            return Err(Error::Config("at least one composite offset is required".into()));
        }
        if self.tta && self.composite_offsets_deg.len() < 2 {
            return Err(Error::Config("test-time augmentation needs two composite offsets".into()));
        }
        for &o in &self.composite_offsets_deg {
            self.layout.layout(o)?;
        }
        if self.k_r == 0 {
            return Err(Error::Config("k_r must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!("score_threshold must be in [0, 1], got {}", self.score_threshold)));
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(Error::Config(format!("eval iou must be in (0, 1], got {}", self.eval.iou_thresh)));
        }
        self.nms.validate()
    }

    pub fn n_composites(&self) -> usize {
        if self.tta {
            2
        } else {
            1
        }
    }

    pub fn composite_layout(&self, k: usize) -> Result<CompositeLayout> {
        let off = *self
            .composite_offsets_deg
            .get(k)
            .ok_or_else(|| Error::Config(format!("no composite offset for composite {k}")))?;
        self.layout.layout(off)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(cfg.validate().is_ok());
        let l = cfg.composite_layout(0).unwrap();
        assert_eq!(l, CompositeLayout::default());
        let l1 = cfg.composite_layout(1).unwrap();
        assert!((l1.phi2_base - 22.5f64.to_radians()).abs() < 1e-15);
        assert_eq!(cfg.nms.a_g, 0.2);
        assert_eq!(cfg.k_r, 10);
    }

    #[test]
    fn partial_overrides_and_unknown_keys() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"k_r": 5, "nms": {"method": "bbr"}, "camera": {"radius": 400}}"#).unwrap();
        assert_eq!(cfg.k_r, 5);
        assert_eq!(cfg.nms.method, crate::nms::Stage2Method::Bbr);
        assert_eq!(cfg.nms.hard_iou, 0.45);
        assert_eq!(cfg.camera.camera().unwrap().radius, 400.0);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"kr": 5}"#).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = PipelineConfig {
            tta: true,
            composite_offsets_deg: vec![0.0],
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = PipelineConfig {
            k_r: 0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
        let mut bad = PipelineConfig::default();
        bad.layout.columns = 3;
        assert!(bad.validate().unwrap_err().is_config());
    }
}
