//! Polar-axis-aligned rotated rectangles and exact intersection-over-union.
//!
//! A [`PolarBox`] stores only its center and extents. Its orientation is
//! implied by the center: the `height` axis points away from the fisheye
//! center `C` and the `width` axis is tangential. Boxes centered exactly on
//! `C` fall back to the image axes.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CLIP_EPS: f64 = 1e-9;

/// Axis-aligned box given by its min and max corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl AxisBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0) || !self.x0.is_finite() || !self.y0.is_finite()
    }

    pub fn intersection(&self, other: &AxisBox) -> Option<AxisBox> {
        let b = AxisBox::new(self.x0.max(other.x0), self.y0.max(other.y0), self.x1.min(other.x1), self.y1.min(other.y1));
        (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> AxisBox {
        AxisBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> AxisBox {
        AxisBox::new(self.x0 * sx, self.y0 * sy, self.x1 * sx, self.y1 * sy)
    }

    pub fn contains_box(&self, other: &AxisBox, tol: f64) -> bool {
        other.x0 >= self.x0 - tol && other.y0 >= self.y0 - tol && other.x1 <= self.x1 + tol && other.y1 <= self.y1 + tol
    }
}

/// Intersection-over-union of two axis-aligned boxes.
pub fn iou_axis_aligned(a: &AxisBox, b: &AxisBox) -> f64 {
    let iw = a.x1.min(b.x1) - a.x0.max(b.x0);
    let ih = a.y1.min(b.y1) - a.y0.max(b.y0);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Rotated rectangle in the fisheye frame whose axes are radial and tangential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarBox {
    pub center_x: f64,
    pub center_y: f64,
    /// Tangential extent in pixels.
    pub width: f64,
    /// Radial extent in pixels.
    pub height: f64,
}

/// The `[center_x, center_y, width, height]` view used for weighted averaging.
pub type BoxVec4 = [f64; 4];

impl PolarBox {
    pub fn new(center_x: f64, center_y: f64, width: f64, height: f64) -> Self {
        Self {
            center_x,
            center_y,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width > 0.0 && self.height > 0.0 && self.center_x.is_finite() && self.center_y.is_finite() {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid polar box {self:?}")))
        }
    }

    pub fn center(&self) -> Point2<f64> {
        Point2::new(self.center_x, self.center_y)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn to_vec4(&self) -> BoxVec4 {
        [self.center_x, self.center_y, self.width, self.height]
    }

    pub fn from_vec4(v: BoxVec4) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Radial unit vector at the box center, `None` when centered on `origin`.
    pub fn radial_axis(&self, origin: Point2<f64>) -> Option<Vector2<f64>> {
        let d = self.center() - origin;
        let n = d.norm();
        (n > 0.0).then(|| d / n)
    }

    /// Radial axis, or the image y axis for a box centered on `origin`.
    pub fn radial_axis_or_default(&self, origin: Point2<f64>) -> Vector2<f64> {
        self.radial_axis(origin).unwrap_or_else(|| Vector2::new(0.0, 1.0))
    }

    /// Orientation of the radial (height) axis in radians, measured like `atan2(dy, dx)`.
    pub fn angle(&self, origin: Point2<f64>) -> f64 {
        let u = self.radial_axis_or_default(origin);
        u.y.atan2(u.x)
    }

    /// Rotates the box center about `origin` by `angle` radians.
    pub fn rotated_about(&self, origin: Point2<f64>, angle: f64) -> PolarBox {
        let (s, c) = angle.sin_cos();
        let d = self.center() - origin;
        PolarBox::new(origin.x + c * d.x - s * d.y, origin.y + s * d.x + c * d.y, self.width, self.height)
    }

    /// Corners ordered with positive shoelace area, failing for a box centered on `origin`.
    pub fn corners(&self, origin: Point2<f64>) -> Result<[Point2<f64>; 4]> {
        let u = self.radial_axis(origin).ok_or(Error::DegenerateOrientation)?;
        Ok(self.corners_with_axis(u))
    }

    /// Corners with the image-axis fallback for a box centered on `origin`.
    pub fn corners_or_axis_aligned(&self, origin: Point2<f64>) -> [Point2<f64>; 4] {
        self.corners_with_axis(self.radial_axis_or_default(origin))
    }

    fn corners_with_axis(&self, u: Vector2<f64>) -> [Point2<f64>; 4] {
        let v = Vector2::new(-u.y, u.x);
        let c = self.center();
        let hu = u * (self.height / 2.0);
        let hv = v * (self.width / 2.0);
        [c - hu - hv, c + hu - hv, c + hu + hv, c - hu + hv]
    }

    /// Radius of the circle circumscribing the box.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.width.hypot(self.height)
    }
}

pub fn polygon_area(poly: &[Point2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p.x * q.y - q.x * p.y;
    }
    0.5 * s
}

/// Clips a polygon against the convex, positively oriented polygon `clip`.
pub fn clip_convex(subject: &[Point2<f64>], clip: &[Point2<f64>]) -> Vec<Point2<f64>> {
    let mut out: Vec<Point2<f64>> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let edge = b - a;
        let side = |p: &Point2<f64>| edge.x * (p.y - a.y) - edge.y * (p.x - a.x);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(&cur), side(&prev));
            let cur_in = sc >= -CLIP_EPS;
            let prev_in = sp >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    out.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
                out.push(cur);
            } else if prev_in {
                out.push(prev + (cur - prev) * (sp / (sp - sc)));
            }
        }
    }
    out
}

/// Exact IOU of two polar boxes through convex polygon clipping.
pub fn iou_rotated(a: &PolarBox, b: &PolarBox, origin: Point2<f64>) -> f64 {
    let dist = (a.center() - b.center()).norm();
    if dist >= a.circumradius() + b.circumradius() {
        return 0.0;
    }
    let pa = a.corners_or_axis_aligned(origin);
    let pb = b.corners_or_axis_aligned(origin);
    let inter = polygon_area(&clip_convex(&pa, &pb)).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// JSON form of a polar box. `angle_rad` is written for other tools and ignored on read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarBoxJson {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_rad: Option<f64>,
}

impl PolarBoxJson {
    pub fn with_origin(b: &PolarBox, origin: Point2<f64>) -> Self {
        Self {
            cx: b.center_x,
            cy: b.center_y,
            w: b.width,
            h: b.height,
            angle_rad: Some(b.angle(origin)),
        }
    }
}

impl From<PolarBoxJson> for PolarBox {
    fn from(j: PolarBoxJson) -> Self {
        PolarBox::new(j.cx, j.cy, j.w, j.h)
    }
}
