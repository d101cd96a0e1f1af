//! Equi-distance fisheye camera model and perspective-view frame math.
//!
//! Camera coordinates follow the fisheye image: `x` to the right, `y` down the
//! image rows and `z` along the optical axis (towards the floor for a
//! ceiling-mounted camera). A fisheye point at distance `r` from the image
//! center `C` sees along a ray whose incidence angle is `theta0 * r / R0`.
//!
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`, so its center sits at
//! `(i + 0.5, j + 0.5)`. Relative patch coordinates map patch pixel centers
//! linearly onto `[-1, 1]`.

use std::io::{Read, Write};

use nalgebra::{Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Smallest accepted view-axis tilt. Below this the frame's x axis is ill-defined.
pub const MIN_PHI1: f64 = 0.5 * std::f64::consts::PI / 180.0;

const ORTHO_TOL: f64 = 1e-9;

/// Equi-distance fisheye camera: image circle center/radius and the incidence
/// angle at the circle boundary, plus the raster size the circle lives in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisheyeCamera {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub max_angle: f64,
    pub width: usize,
    pub height: usize,
}

impl FisheyeCamera {
    pub fn new(center_x: f64, center_y: f64, radius: f64, max_angle: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            center_x,
            center_y,
            radius,
            max_angle,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera whose circle is centered in a `width x height` image.
    pub fn centered(width: usize, height: usize, radius: f64, max_angle: f64) -> Result<Self> {
        Self::new(width as f64 / 2.0, height as f64 / 2.0, radius, max_angle, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("fisheye radius must be positive, got {}", self.radius)));
        }
        if !(self.max_angle > 0.0 && self.max_angle <= std::f64::consts::PI) {
            return Err(Error::Config(format!("max incidence angle must be in (0, pi], got {}", self.max_angle)));
        }
        if !(self.center_x.is_finite() && self.center_y.is_finite()) {
            return Err(Error::Config("fisheye center must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("fisheye image dimensions must be non-zero".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn center(&self) -> Point2<f64> {
        Point2::new(self.center_x, self.center_y)
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        dx * dx + dy * dy <= self.radius * self.radius
    }

    /// Unit ray for a fisheye point, without the in-circle check. Points beyond
    /// the circle extrapolate the equi-distance law.
    #[inline]
    pub(crate) fn ray_unchecked(&self, x: f64, y: f64) -> Vector3<f64> {
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let r = (dx * dx + dy * dy).sqrt();
        if r == 0.0 {
            return Vector3::z();
        }
        let theta = self.max_angle * r / self.radius;
        let s = theta.sin() / r;
        Vector3::new(dx * s, dy * s, theta.cos())
    }

    /// Fisheye point of a ray plus its incidence angle, ignoring the field-of-view limit.
    #[inline]
    pub(crate) fn project_unchecked(&self, pc: &Vector3<f64>) -> (f64, f64, f64) {
        let rho = (pc.x * pc.x + pc.y * pc.y).sqrt();
        let theta = rho.atan2(pc.z);
        if rho == 0.0 {
            return (self.center_x, self.center_y, theta);
        }
        let r = self.radius * theta / self.max_angle;
        (self.center_x + r * pc.x / rho, self.center_y + r * pc.y / rho, theta)
    }
}

/// Incidence angle of the ray seen at radial distance `r` from the image center.
pub fn incidence_angle(r: f64, cam: &FisheyeCamera) -> Result<f64> {
    if !(0.0..=cam.radius).contains(&r) {
        return Err(Error::Domain(format!("radial distance {r} outside [0, {}]", cam.radius)));
    }
    Ok(cam.max_angle * r / cam.radius)
}

/// Maps a camera-frame ray to fisheye pixel coordinates.
///
/// Returns `Ok(None)` when the ray's incidence angle exceeds the camera's
/// maximum angle. The transverse component is normalized before scaling, so
/// the result lies exactly `R0 * theta / theta0` from the center.
pub fn ray_to_fisheye(pc: &Vector3<f64>, cam: &FisheyeCamera) -> Result<Option<Point2<f64>>> {
    if pc.norm_squared() == 0.0 || !pc.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("cannot project a zero or non-finite ray".into()));
    }
    let (x, y, theta) = cam.project_unchecked(pc);
    if theta > cam.max_angle {
        return Ok(None);
    }
    Ok(Some(Point2::new(x, y)))
}

/// Unit ray direction seen by fisheye pixel coordinates `(x, y)`.
pub fn fisheye_to_ray(x: f64, y: f64, cam: &FisheyeCamera) -> Result<Vector3<f64>> {
    if !cam.contains(x, y) {
        return Err(Error::Domain(format!("point ({x}, {y}) lies outside the fisheye circle")));
    }
    Ok(cam.ray_unchecked(x, y))
}

/// Orthonormal axes of a perspective view, expressed in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewFrame {
    pub x_axis: Vector3<f64>,
    pub y_axis: Vector3<f64>,
    pub z_axis: Vector3<f64>,
}

impl ViewFrame {
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let unit = |v: &Vector3<f64>| (v.norm() - 1.0).abs() < tol;
        unit(&self.x_axis)
            && unit(&self.y_axis)
            && unit(&self.z_axis)
            && self.x_axis.dot(&self.y_axis).abs() < tol
            && self.y_axis.dot(&self.z_axis).abs() < tol
            && self.z_axis.dot(&self.x_axis).abs() < tol
            && (self.x_axis.cross(&self.y_axis) - self.z_axis).norm() < tol
    }
}

/// View frame whose axis is tilted `phi1` from the optical axis towards azimuth `phi2`.
pub fn view_frame(phi1: f64, phi2: f64) -> Result<ViewFrame> {
    if !(MIN_PHI1..=std::f64::consts::PI - MIN_PHI1).contains(&phi1) {
        return Err(Error::DegenerateFrame { phi1 });
    }
    let (s1, c1) = phi1.sin_cos();
    let (s2, c2) = phi2.sin_cos();
    let z_axis = Vector3::new(s1 * c2, s1 * s2, c1);
    let x_axis = Vector3::z().cross(&z_axis).normalize();
    let y_axis = z_axis.cross(&x_axis);
    let frame = ViewFrame { x_axis, y_axis, z_axis };
    debug_assert!(frame.is_orthonormal(ORTHO_TOL));
    Ok(frame)
}

/// One perspective view: axis angles, field of view and pixel size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub phi1: f64,
    pub phi2: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub width_px: usize,
    pub height_px: usize,
}

impl PatchSpec {
    pub fn new(phi1: f64, phi2: f64, alpha_x: f64, alpha_y: f64, width_px: usize, height_px: usize) -> Result<Self> {
        let spec = Self {
            phi1,
            phi2,
            alpha_x,
            alpha_y,
            width_px,
            height_px,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::PI;
        if !(self.phi1 > 0.0 && self.phi1 < PI) {
            return Err(Error::Config(format!("phi1 must lie in (0, pi), got {}", self.phi1)));
        }
        for (name, a) in [("alpha_x", self.alpha_x), ("alpha_y", self.alpha_y)] {
            if !(a > 0.0 && a < PI) {
                return Err(Error::Config(format!("{name} must lie in (0, pi), got {a}")));
            }
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Config("patch dimensions must be non-zero".into()));
        }
        if !self.phi2.is_finite() {
            return Err(Error::Config("phi2 must be finite".into()));
        }
        Ok(())
    }

    pub fn frame(&self) -> Result<ViewFrame> {
        view_frame(self.phi1, self.phi2)
    }

    /// Relative coordinate of the center of patch column `i`.
    #[inline]
    pub fn col_to_rel(&self, i: f64) -> f64 {
        2.0 * (i + 0.5) / self.width_px as f64 - 1.0
    }

    #[inline]
    pub fn row_to_rel(&self, j: f64) -> f64 {
        2.0 * (j + 0.5) / self.height_px as f64 - 1.0
    }

    /// Continuous patch pixel coordinates (pixel edges on integers) for relative coordinates.
    #[inline]
    pub fn rel_to_px(&self, xp: f64, yp: f64) -> (f64, f64) {
        ((xp + 1.0) * 0.5 * self.width_px as f64, (yp + 1.0) * 0.5 * self.height_px as f64)
    }

    #[inline]
    pub fn px_to_rel(&self, u: f64, v: f64) -> (f64, f64) {
        (2.0 * u / self.width_px as f64 - 1.0, 2.0 * v / self.height_px as f64 - 1.0)
    }
}

/// Where a ray lands relative to a perspective patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchHit {
    Inside { xp: f64, yp: f64 },
    /// In front of the view but beyond the patch borders.
    Outside { xp: f64, yp: f64 },
    Behind,
}

impl PatchHit {
    pub fn inside(&self) -> Option<(f64, f64)> {
        match *self {
            PatchHit::Inside { xp, yp } => Some((xp, yp)),
            _ => None,
        }
    }

    pub fn coords(&self) -> Option<(f64, f64)> {
        match *self {
            PatchHit::Inside { xp, yp } | PatchHit::Outside { xp, yp } => Some((xp, yp)),
            PatchHit::Behind => None,
        }
    }
}

/// A patch spec with its frame and half-angle tangents precomputed, for bulk mapping.
#[derive(Debug, Clone, Copy)]
pub struct PatchProjector {
    pub spec: PatchSpec,
    pub frame: ViewFrame,
    tan_x: f64,
    tan_y: f64,
}

impl PatchProjector {
    pub fn new(spec: &PatchSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: *spec,
            frame: spec.frame()?,
            tan_x: (spec.alpha_x / 2.0).tan(),
            tan_y: (spec.alpha_y / 2.0).tan(),
        })
    }

    #[inline]
    pub fn pixel_to_ray(&self, xp: f64, yp: f64) -> Vector3<f64> {
        self.frame.z_axis + self.frame.x_axis * (xp * self.tan_x) + self.frame.y_axis * (yp * self.tan_y)
    }

    #[inline]
    pub fn ray_to_pixel(&self, pc: &Vector3<f64>) -> PatchHit {
        let depth = pc.dot(&self.frame.z_axis);
        if depth <= 0.0 {
            return PatchHit::Behind;
        }
        let xp = pc.dot(&self.frame.x_axis) / depth / self.tan_x;
        let yp = pc.dot(&self.frame.y_axis) / depth / self.tan_y;
        if xp.abs() <= 1.0 && yp.abs() <= 1.0 {
            PatchHit::Inside { xp, yp }
        } else {
            PatchHit::Outside { xp, yp }
        }
    }

    /// Largest angle between the view axis and any ray through the patch.
    pub fn half_cone_angle(&self) -> f64 {
        (self.tan_x * self.tan_x + self.tan_y * self.tan_y).sqrt().atan()
    }
}

/// Ray direction (not normalized) through relative patch coordinates `(xp, yp)`.
pub fn patch_pixel_to_ray(xp: f64, yp: f64, spec: &PatchSpec) -> Result<Vector3<f64>> {
    Ok(PatchProjector::new(spec)?.pixel_to_ray(xp, yp))
}

/// Relative patch coordinates of a ray, or where it falls if not inside the patch.
pub fn ray_to_patch_pixel(pc: &Vector3<f64>, spec: &PatchSpec) -> Result<PatchHit> {
    Ok(PatchProjector::new(spec)?.ray_to_pixel(pc))
}

/// Four-tap bilinear sample plan for one patch pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    idx: [u32; 4],
    w: [f32; 4],
}

const BLACK_TAP: Tap = Tap {
    idx: [0; 4],
    w: [0.0; 4],
};

/// Precomputed fisheye source coordinates for every pixel of one patch.
#[derive(Debug, Clone)]
pub struct WarpLut {
    pub spec: PatchSpec,
    pub camera: FisheyeCamera,
    /// Row-major source coordinates; `NaN` pairs mark pixels outside the field of view.
    coords: Vec<[f32; 2]>,
    taps: Vec<Tap>,
}

pub const LUT_MAGIC: &[u8; 6] = b"FPLUT1";

impl WarpLut {
    pub fn width(&self) -> usize {
        self.spec.width_px
    }

    pub fn height(&self) -> usize {
        self.spec.height_px
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }

    /// Source point of patch pixel `(i, j)`, or `None` when invalid.
    pub fn source(&self, i: usize, j: usize) -> Option<(f32, f32)> {
        let [x, y] = self.coords[j * self.spec.width_px + i];
        (!x.is_nan()).then_some((x, y))
    }

    fn from_coords(spec: PatchSpec, camera: FisheyeCamera, coords: Vec<[f32; 2]>) -> Self {
        let taps = coords.iter().map(|c| compile_tap(c, &camera)).collect();
        Self {
            spec,
            camera,
            coords,
            taps,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(LUT_MAGIC)?;
        w.write_all(&(self.spec.width_px as u32).to_le_bytes())?;
        w.write_all(&(self.spec.height_px as u32).to_le_bytes())?;
        let c = &self.camera;
        let s = &self.spec;
        for v in [
            c.center_x,
            c.center_y,
            c.radius,
            c.max_angle,
            c.width as f64,
            c.height as f64,
            s.phi1,
            s.phi2,
            s.alpha_x,
            s.alpha_y,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.coords.len() * 8);
        for [x, y] in &self.coords {
            buf.extend_from_slice(&x.to_le_bytes());
            buf.extend_from_slice(&y.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != LUT_MAGIC {
            return Err(Error::Data("not a FPLUT1 lookup table".into()));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let width = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let height = u32::from_le_bytes(u) as usize;
        let mut vals = [0f64; 10];
        let mut b = [0u8; 8];
        for v in vals.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let camera = FisheyeCamera::new(vals[0], vals[1], vals[2], vals[3], vals[4] as usize, vals[5] as usize)?;
        let spec = PatchSpec::new(vals[6], vals[7], vals[8], vals[9], width, height)?;
        let mut raw = vec![0u8; width * height * 8];
        r.read_exact(&mut raw)?;
        let coords = raw
            .chunks_exact(8)
            .map(|c| {
                [
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                ]
            })
            .collect();
        Ok(Self::from_coords(spec, camera, coords))
    }
}

fn compile_tap(c: &[f32; 2], cam: &FisheyeCamera) -> Tap {
    if c[0].is_nan() {
        return BLACK_TAP;
    }
    let (w, h) = (cam.width as i64, cam.height as i64);
    let sx = c[0] as f64 - 0.5;
    let sy = c[1] as f64 - 0.5;
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let neighbors = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
    let mut weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let mut idx = [0u32; 4];
    let r2 = cam.radius * cam.radius;
    let mut total = 0.0;
    for (k, &(nx, ny)) in neighbors.iter().enumerate() {
        let inside_img = nx >= 0 && ny >= 0 && nx < w && ny < h;
        let (dx, dy) = (nx as f64 + 0.5 - cam.center_x, ny as f64 + 0.5 - cam.center_y);
        if inside_img && dx * dx + dy * dy <= r2 {
            idx[k] = (ny * w + nx) as u32;
            total += weights[k];
        } else {
            weights[k] = 0.0;
        }
    }
    if total <= 0.0 {
        // Every neighbor center is outside the circle: fall back to the nearest pixel.
        let nx = (c[0] as f64).floor().clamp(0.0, (w - 1) as f64) as i64;
        let ny = (c[1] as f64).floor().clamp(0.0, (h - 1) as f64) as i64;
        return Tap {
            idx: [(ny * w + nx) as u32; 4],
            w: [1.0, 0.0, 0.0, 0.0],
        };
    }
    Tap {
        idx,
        w: weights.map(|v| (v / total) as f32),
    }
}

/// Precomputes the fisheye source point of every pixel of the patch.
pub fn build_warp_lut(spec: &PatchSpec, cam: &FisheyeCamera) -> Result<WarpLut> {
    cam.validate()?;
    let proj = PatchProjector::new(spec)?;
    let (w, h) = (spec.width_px, spec.height_px);
    let mut coords = Vec::with_capacity(w * h);
    for j in 0..h {
        let yp = spec.row_to_rel(j as f64);
        for i in 0..w {
            let xp = spec.col_to_rel(i as f64);
            let pc = proj.pixel_to_ray(xp, yp);
            let (x, y, theta) = cam.project_unchecked(&pc);
            let (xf, yf) = (x as f32, y as f32);
            // The f32 rounding must not push a boundary point out of the circle.
            let valid = theta <= cam.max_angle && cam.contains(xf as f64, yf as f64);
            coords.push(if valid { [xf, yf] } else { [f32::NAN, f32::NAN] });
        }
    }
    Ok(WarpLut::from_coords(*spec, *cam, coords))
}

/// Bilinearly resamples `image` through `lut`. Pixels outside the fisheye view are black.
pub fn warp_patch(image: &Raster, lut: &WarpLut) -> Result<Raster> {
    let mut out = Raster::new(lut.width(), lut.height(), image.channels);
    warp_patch_into(image, lut, &mut out)?;
    Ok(out)
}

pub fn warp_patch_into(image: &Raster, lut: &WarpLut, out: &mut Raster) -> Result<()> {
    if image.width != lut.camera.width || image.height != lut.camera.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} fisheye image", lut.camera.width, lut.camera.height),
            actual: format!("{}x{}", image.width, image.height),
        });
    }
    if out.width != lut.width() || out.height != lut.height() || out.channels != image.channels {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}x{} patch", lut.width(), lut.height(), image.channels),
            actual: format!("{}x{}x{}", out.width, out.height, out.channels),
        });
    }
    let src = &image.data;
    match image.channels {
        1 => {
            for (tap, px) in lut.taps.iter().zip(out.data.iter_mut()) {
                let v = tap.w[0] * src[tap.idx[0] as usize] as f32
                    + tap.w[1] * src[tap.idx[1] as usize] as f32
                    + tap.w[2] * src[tap.idx[2] as usize] as f32
                    + tap.w[3] * src[tap.idx[3] as usize] as f32;
                *px = (v + 0.5) as u8;
            }
        }
        ch => {
            for (tap, px) in lut.taps.iter().zip(out.data.chunks_exact_mut(ch)) {
                for (c, dst) in px.iter_mut().enumerate() {
                    let mut v = 0.0f32;
                    for k in 0..4 {
                        v += tap.w[k] * src[tap.idx[k] as usize * ch + c] as f32;
                    }
                    *dst = (v + 0.5) as u8;
                }
            }
        }
    }
    Ok(())
}
