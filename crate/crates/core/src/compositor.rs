//! Tiling of perspective patches into one square composite image, and
//! translation of boxes between composite and patch pixel frames.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_warp_lut, warp_patch, FisheyeCamera, PatchProjector, PatchSpec, WarpLut};
use crate::raster::Raster;
use crate::rotrect::AxisBox;

/// Grid of patches forming a composite. Patch `k` sits in column `k % columns`, row `k / columns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeLayout {
    pub n_patches: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    pub columns: usize,
    pub rows: usize,
    pub composite_size: usize,
    pub phi2_base: f64,
    pub phi2_step: f64,
    pub phi1: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
}

impl Default for CompositeLayout {
    fn default() -> Self {
        Self {
            n_patches: 8,
            patch_w: 152,
            patch_h: 304,
            columns: 4,
            rows: 2,
            composite_size: 608,
            phi2_base: 0.0,
            phi2_step: 45f64.to_radians(),
            phi1: 36f64.to_radians(),
            alpha_x: 48f64.to_radians(),
            alpha_y: 96f64.to_radians(),
        }
    }
}

impl CompositeLayout {
    /// Layout of `columns x rows` patches filling a square of `composite_size` pixels.
    pub fn grid(columns: usize, rows: usize, composite_size: usize) -> Result<Self> {
        if columns == 0 || rows == 0 || !composite_size.is_multiple_of(columns) || !composite_size.is_multiple_of(rows) {
            return Err(Error::Config(format!(
                "a {columns}x{rows} grid does not tile a {composite_size} px composite"
            )));
        }
        let n = columns * rows;
        let layout = Self {
            n_patches: n,
            patch_w: composite_size / columns,
            patch_h: composite_size / rows,
            columns,
            rows,
            composite_size,
            phi2_step: std::f64::consts::TAU / n as f64,
            ..Self::default()
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn with_phi2_base(mut self, phi2_base: f64) -> Self {
        self.phi2_base = phi2_base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.columns * self.patch_w != self.composite_size || self.rows * self.patch_h != self.composite_size {
            return err(format!(
                "{}x{} patches of {}x{} do not tile a {} px composite",
                self.columns, self.rows, self.patch_w, self.patch_h, self.composite_size
            ));
        }
        if self.n_patches != self.columns * self.rows || self.n_patches == 0 {
            return err(format!("n_patches {} != {}x{}", self.n_patches, self.columns, self.rows));
        }
        if (self.phi2_step - std::f64::consts::TAU / self.n_patches as f64).abs() > 1e-9 {
            return err(format!("phi2_step must be 2*pi/{}", self.n_patches));
        }
        self.patch_spec(0).validate()
    }

    pub fn patch_spec(&self, k: usize) -> PatchSpec {
        PatchSpec {
            phi1: self.phi1,
            phi2: self.phi2_base + k as f64 * self.phi2_step,
            alpha_x: self.alpha_x,
            alpha_y: self.alpha_y,
            width_px: self.patch_w,
            height_px: self.patch_h,
        }
    }

    /// Grid cell `(column, row)` of patch `k`.
    pub fn cell(&self, k: usize) -> (usize, usize) {
        (k % self.columns, k / self.columns)
    }

    /// Top-left composite pixel of patch `k`.
    pub fn cell_origin(&self, k: usize) -> (usize, usize) {
        let (c, r) = self.cell(k);
        (c * self.patch_w, r * self.patch_h)
    }

    pub fn cell_box(&self, k: usize) -> AxisBox {
        let (x, y) = self.cell_origin(k);
        AxisBox::from_xywh(x as f64, y as f64, self.patch_w as f64, self.patch_h as f64)
    }
}

/// One patch spec per grid cell, in patch order.
pub fn layout_patch_specs(layout: &CompositeLayout) -> Vec<PatchSpec> {
    (0..layout.n_patches).map(|k| layout.patch_spec(k)).collect()
}

/// Warp tables for every patch of a layout, built for one camera.
#[derive(Debug, Clone)]
pub struct CompositeLuts {
    pub layout: CompositeLayout,
    pub camera: FisheyeCamera,
    pub luts: Vec<WarpLut>,
}

impl CompositeLuts {
    pub fn build(layout: &CompositeLayout, cam: &FisheyeCamera) -> Result<Self> {
        layout.validate()?;
        let luts = layout_patch_specs(layout)
            .par_iter()
            .map(|s| build_warp_lut(s, cam))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layout: *layout,
            camera: *cam,
            luts,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CompositeImage {
    pub raster: Raster,
    pub specs: Vec<PatchSpec>,
}

/// Warps every patch of the layout and tiles them into one composite.
pub fn build_composite(image: &Raster, luts: &CompositeLuts) -> Result<CompositeImage> {
    let layout = &luts.layout;
    let patches = luts.luts.par_iter().map(|lut| warp_patch(image, lut)).collect::<Result<Vec<_>>>()?;
    let mut raster = Raster::new(layout.composite_size, layout.composite_size, image.channels);
    for (k, p) in patches.iter().enumerate() {
        let (x, y) = layout.cell_origin(k);
        raster.blit(p, x, y)?;
    }
    Ok(CompositeImage {
        raster,
        specs: luts.luts.iter().map(|l| l.spec).collect(),
    })
}

/// Assigns a composite-frame box to the patch containing its center and crops
/// it to that patch, returning the crop in patch-local pixels. A center on a
/// cell edge goes to the cell with the larger index along that axis.
pub fn composite_box_to_patch(b: &AxisBox, layout: &CompositeLayout) -> Result<(usize, AxisBox)> {
    if b.is_degenerate() {
        return Err(Error::Data(format!("degenerate detection box {b:?}")));
    }
    let (cx, cy) = b.center();
    let size = layout.composite_size as f64;
    if !(0.0..size).contains(&cx) || !(0.0..size).contains(&cy) {
        return Err(Error::Data(format!("box center ({cx}, {cy}) lies outside the composite")));
    }
    let col = ((cx / layout.patch_w as f64).floor() as usize).min(layout.columns - 1);
    let row = ((cy / layout.patch_h as f64).floor() as usize).min(layout.rows - 1);
    let k = row * layout.columns + col;
    let cell = layout.cell_box(k);
    let crop = b.intersection(&cell).expect("a cell contains the box center");
    Ok((k, crop.translate(-cell.x0, -cell.y0)))
}

/// Per-pixel count of patches that see each fisheye pixel.
#[derive(Debug, Clone)]
pub struct CoverageMap {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u8>,
}

impl CoverageMap {
    pub fn count(&self, x: usize, y: usize) -> u8 {
        self.counts[y * self.width + x]
    }

    /// Fraction of pixels with zero coverage among those whose center lies within
    /// `radius` of the camera center.
    pub fn gap_fraction(&self, cam: &FisheyeCamera, radius: f64) -> f64 {
        let (mut n, mut gaps) = (0usize, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let (dx, dy) = (x as f64 + 0.5 - cam.center_x, y as f64 + 0.5 - cam.center_y);
                if dx * dx + dy * dy <= radius * radius {
                    n += 1;
                    gaps += (self.count(x, y) == 0) as usize;
                }
            }
        }
        gaps as f64 / n.max(1) as f64
    }

    pub fn mean_count(&self, cam: &FisheyeCamera, radius: f64) -> f64 {
        let (mut n, mut sum) = (0usize, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let (dx, dy) = (x as f64 + 0.5 - cam.center_x, y as f64 + 0.5 - cam.center_y);
                if dx * dx + dy * dy <= radius * radius {
                    n += 1;
                    sum += self.count(x, y) as usize;
                }
            }
        }
        sum as f64 / n.max(1) as f64
    }
}

pub fn coverage_map(layout: &CompositeLayout, cam: &FisheyeCamera) -> Result<CoverageMap> {
    layout.validate()?;
    let projectors = layout_patch_specs(layout)
        .iter()
        .map(PatchProjector::new)
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (cam.width, cam.height);
    let mut counts = vec![0u8; w * h];
    counts.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, c) in row.iter_mut().enumerate() {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if !cam.contains(fx, fy) {
                continue;
            }
            let ray = cam.ray_unchecked(fx, fy);
            *c = projectors.iter().filter(|p| p.ray_to_pixel(&ray).inside().is_some()).count() as u8;
        }
    });
    Ok(CoverageMap {
        width: w,
        height: h,
        counts,
    })
}

/// Entry of the JSON sidecar written next to each composite image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecarEntry {
    pub phi1: f64,
    pub phi2: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub cell_x: usize,
    pub cell_y: usize,
    pub w: usize,
    pub h: usize,
}

pub fn patch_sidecar(layout: &CompositeLayout) -> Vec<PatchSidecarEntry> {
    (0..layout.n_patches)
        .map(|k| {
            let s = layout.patch_spec(k);
            let (cell_x, cell_y) = layout.cell(k);
            PatchSidecarEntry {
                phi1: s.phi1,
                phi2: s.phi2,
                alpha_x: s.alpha_x,
                alpha_y: s.alpha_y,
                cell_x,
                cell_y,
                w: s.width_px,
                h: s.height_px,
            }
        })
        .collect()
}
