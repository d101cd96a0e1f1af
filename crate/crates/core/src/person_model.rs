//! Cylinder pedestrian model and target-box generation in the fisheye frame.
//!
//! World coordinates are meters on the ground plane, with the camera directly
//! above the origin looking down. A world point `(X, Y)` at height `Z` is seen
//! along the camera ray `(X, Y, camera_height - Z)`.

use nalgebra::{Point2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FisheyeCamera;
use crate::rotrect::{PolarBox, PolarBoxJson};

/// Samples per circle of the cylinder outline.
pub const AZIMUTH_SAMPLES: usize = 360;
/// Samples along each silhouette edge of the cylinder.
pub const EDGE_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderPerson {
    pub ground_x: f64,
    pub ground_y: f64,
    pub height: f64,
    pub diameter: f64,
}

impl CylinderPerson {
    pub fn new(ground_x: f64, ground_y: f64, height: f64, diameter: f64) -> Self {
        Self {
            ground_x,
            ground_y,
            height,
            diameter,
        }
    }

    pub fn ground_distance(&self) -> f64 {
        self.ground_x.hypot(self.ground_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub camera_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonTemplate {
    pub height: f64,
    pub diameter: f64,
}

/// One combination of camera height and person size used to generate target boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub camera_height: f64,
    pub person_height: f64,
    pub diameter: f64,
}

impl ParameterSet {
    pub fn scene(&self) -> SceneParams {
        SceneParams {
            camera_height: self.camera_height,
        }
    }

    pub fn template(&self) -> PersonTemplate {
        PersonTemplate {
            height: self.person_height,
            diameter: self.diameter,
        }
    }

    pub fn id(&self) -> String {
        format!("cam{:.2}_h{:.2}_d{:.2}", self.camera_height, self.person_height, self.diameter)
    }
}

/// The twelve combinations of person height, diameter and camera height.
pub fn default_parameter_grid() -> Vec<ParameterSet> {
    let mut out = Vec::with_capacity(12);
    for &camera_height in &[2.75, 3.25] {
        for &person_height in &[1.3, 1.5, 1.7] {
            for &diameter in &[0.45, 0.6] {
                out.push(ParameterSet {
                    camera_height,
                    person_height,
                    diameter,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlineDensity {
    pub azimuth: usize,
    pub edge: usize,
}

impl Default for OutlineDensity {
    fn default() -> Self {
        Self {
            azimuth: AZIMUTH_SAMPLES,
            edge: EDGE_SAMPLES,
        }
    }
}

fn check_person(person: &CylinderPerson, scene: &SceneParams) -> Result<()> {
    if !(person.height > 0.0 && person.diameter > 0.0) {
        return Err(Error::Domain(format!("person dimensions must be positive: {person:?}")));
    }
    if !(scene.camera_height > person.height) {
        return Err(Error::Domain(format!(
            "camera height {} must exceed person height {}",
            scene.camera_height, person.height
        )));
    }
    Ok(())
}

/// Camera-frame points on the cylinder's top and bottom circles and its two
/// silhouette edges.
pub fn cylinder_outline(person: &CylinderPerson, scene: &SceneParams, density: OutlineDensity) -> Vec<Vector3<f64>> {
    let h = scene.camera_height;
    let rho = person.diameter / 2.0;
    let (gx, gy) = (person.ground_x, person.ground_y);
    let d = person.ground_distance();
    let radial = if d > 0.0 { (gx / d, gy / d) } else { (1.0, 0.0) };
    // Circle samples start at the person's own azimuth so the outline rotates with it.
    let base = radial.1.atan2(radial.0);
    let mut pts = Vec::with_capacity(2 * density.azimuth + 2 * density.edge);
    for k in 0..density.azimuth {
        let a = base + std::f64::consts::TAU * k as f64 / density.azimuth as f64;
        let (x, y) = (gx + rho * a.cos(), gy + rho * a.sin());
        pts.push(Vector3::new(x, y, h - person.height));
        pts.push(Vector3::new(x, y, h));
    }
    let side = (-radial.1 * rho, radial.0 * rho);
    for s in [1.0, -1.0] {
        for k in 0..density.edge {
            let z = person.height * k as f64 / (density.edge - 1).max(1) as f64;
            pts.push(Vector3::new(gx + s * side.0, gy + s * side.1, h - z));
        }
    }
    pts
}

/// Smallest polar-axis-aligned rectangle enclosing `points`, oriented by the
/// polar angle of their centroid.
pub fn enclosing_polar_box(points: &[Point2<f64>], origin: Point2<f64>) -> Option<PolarBox> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector2::zeros(), |acc, p| acc + p.coords) / n;
    let offset = Point2::from(centroid) - origin;
    let scale = points.iter().map(|p| (p - origin).norm()).fold(1.0, f64::max);
    let degenerate = offset.norm() <= 1e-9 * scale;
    let u = if degenerate {
        Vector2::new(0.0, 1.0)
    } else {
        offset.normalize()
    };
    let v = Vector2::new(-u.y, u.x);
    let (mut rmin, mut rmax, mut tmin, mut tmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        let d = p - origin;
        let (r, t) = (d.dot(&u), d.dot(&v));
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        tmin = tmin.min(t);
        tmax = tmax.max(t);
    }
    let mut center = origin + u * (0.5 * (rmin + rmax)) + v * (0.5 * (tmin + tmax));
    if degenerate && (center - origin).norm() <= 1e-9 * scale {
        center = origin;
    }
    Some(PolarBox::new(center.x, center.y, tmax - tmin, rmax - rmin))
}

/// Fisheye-frame box of a cylinder person.
pub fn project_cylinder(person: &CylinderPerson, scene: &SceneParams, cam: &FisheyeCamera) -> Result<PolarBox> {
    project_cylinder_with(person, scene, cam, OutlineDensity::default())
}

pub fn project_cylinder_with(
    person: &CylinderPerson,
    scene: &SceneParams,
    cam: &FisheyeCamera,
    density: OutlineDensity,
) -> Result<PolarBox> {
    check_person(person, scene)?;
    let pts: Vec<Point2<f64>> = cylinder_outline(person, scene, density)
        .iter()
        .filter_map(|p| {
            let (x, y, theta) = cam.project_unchecked(p);
            (theta <= cam.max_angle).then(|| Point2::new(x, y))
        })
        .collect();
    enclosing_polar_box(&pts, cam.center()).ok_or(Error::OutOfView)
}

/// Sampling rule for target boxes on concentric rings around the nadir.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSampling {
    /// Minimum overlap between neighbors, `1 - spacing / extent`, in both directions.
    pub overlap: f64,
    /// Rings whose boxes are shorter than this (pixels) end the generation.
    pub min_height: f64,
    /// Boxes per ring are rounded up to a multiple of this, keeping the set
    /// symmetric under the composite's azimuth step.
    pub azimuth_multiple: usize,
}

impl Default for TargetSampling {
    fn default() -> Self {
        Self {
            overlap: 0.8,
            min_height: 20.0,
            azimuth_multiple: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ring {
    pub ground_distance: f64,
    /// Distance of the box centers from the fisheye center, pixels.
    pub center_radius: f64,
    pub width: f64,
    pub height: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct TargetBoxSet {
    pub params: ParameterSet,
    pub rings: Vec<Ring>,
    pub boxes: Vec<PolarBox>,
}

#[derive(Serialize, Deserialize)]
struct TargetHeader {
    format: String,
    params: ParameterSet,
    /// Ground distance, meters, and box count of every ring.
    rings: Vec<(f64, usize)>,
    count: usize,
}

const TARGET_FORMAT: &str = "fpw-targets";

impl TargetBoxSet {
    /// JSON lines: a header with the parameter set, then one box per line.
    pub fn write_to(&self, mut w: impl std::io::Write, origin: Point2<f64>) -> Result<()> {
        let header = TargetHeader {
            format: TARGET_FORMAT.into(),
            params: self.params,
            rings: self.rings.iter().map(|r| (r.ground_distance, r.count)).collect(),
            count: self.boxes.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for b in &self.boxes {
            serde_json::to_writer(&mut w, &PolarBoxJson::with_origin(b, origin))?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads what `write_to` wrote. Ring geometry other than distance and
    /// count is not stored, so the returned rings carry zero sizes.
    pub fn read_from(r: impl std::io::BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Data("empty target file".into()))??;
        let header: TargetHeader = serde_json::from_str(&first)?;
        if header.format != TARGET_FORMAT {
            return Err(Error::Data(format!("not a target box file: format {:?}", header.format)));
        }
        let mut boxes = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let b: PolarBoxJson = serde_json::from_str(&line)?;
            boxes.push(PolarBox::new(b.cx, b.cy, b.w, b.h));
        }
        if boxes.len() != header.count {
            return Err(Error::Data(format!("target file holds {} boxes, header says {}", boxes.len(), header.count)));
        }
        Ok(Self {
            params: header.params,
            rings: header
                .rings
                .into_iter()
                .map(|(ground_distance, count)| Ring {
                    ground_distance,
                    center_radius: 0.0,
                    width: 0.0,
                    height: 0.0,
                    count,
                })
                .collect(),
            boxes,
        })
    }
}

const MAX_GROUND_DISTANCE: f64 = 1.0e4;

/// Samples target boxes for one parameter set on rings of ground positions.
pub fn generate_target_boxes(params: &ParameterSet, cam: &FisheyeCamera, sampling: &TargetSampling) -> Result<TargetBoxSet> {
    if !(sampling.overlap > 0.0 && sampling.overlap < 1.0) {
        return Err(Error::Config(format!("overlap must be in (0, 1), got {}", sampling.overlap)));
    }
    let scene = params.scene();
    let tpl = params.template();
    let origin = cam.center();
    let profile = |d: f64| -> Option<PolarBox> {
        project_cylinder(&CylinderPerson::new(d, 0.0, tpl.height, tpl.diameter), &scene, cam).ok()
    };
    let step = 1.0 - sampling.overlap;
    let mut rings = Vec::new();
    let mut boxes = Vec::new();

    let Some(nadir) = profile(0.0).filter(|b| b.height >= sampling.min_height) else {
        check_person(&CylinderPerson::new(0.0, 0.0, tpl.height, tpl.diameter), &scene)?;
        return Ok(TargetBoxSet {
            params: *params,
            rings,
            boxes,
        });
    };
    rings.push(Ring {
        ground_distance: 0.0,
        center_radius: 0.0,
        width: nadir.width,
        height: nadir.height,
        count: 1,
    });
    boxes.push(nadir);

    let (mut d_cur, mut r_cur, mut h_cur) = (0.0, 0.0, nadir.height);
    loop {
        // Radial spacing must not exceed `step` times the smaller of the two heights.
        let gap = |d: f64| -> Option<f64> {
            let b = profile(d)?;
            let r = (b.center() - origin).norm();
            Some(r - r_cur - step * h_cur.min(b.height))
        };
        let mut hi = d_cur + 0.05;
        let mut found = false;
        while hi < MAX_GROUND_DISTANCE {
            match gap(hi) {
                Some(g) if g >= 0.0 => {
                    found = true;
                    break;
                }
                Some(_) => hi = d_cur + 2.0 * (hi - d_cur),
                None => break,
            }
        }
        if !found {
            break;
        }
        let mut lo = d_cur;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            match gap(mid) {
                Some(g) if g <= 0.0 => lo = mid,
                _ => hi = mid,
            }
        }
        if lo <= d_cur {
            break;
        }
        let Some(b) = profile(lo) else { break };
        let r = (b.center() - origin).norm();
        if b.height < sampling.min_height || r - b.height / 2.0 > cam.radius {
            break;
        }
        let per_ring = (std::f64::consts::TAU * r / (step * b.width)).ceil() as usize;
        let m = sampling.azimuth_multiple.max(1);
        let count = per_ring.div_ceil(m).max(1) * m;
        for j in 0..count {
            boxes.push(b.rotated_about(origin, std::f64::consts::TAU * j as f64 / count as f64));
        }
        rings.push(Ring {
            ground_distance: lo,
            center_radius: r,
            width: b.width,
            height: b.height,
            count,
        });
        d_cur = lo;
        r_cur = r;
        h_cur = b.height;
    }
    Ok(TargetBoxSet {
        params: *params,
        rings,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn cam() -> FisheyeCamera {
        FisheyeCamera::centered(1000, 1000, 500.0, FRAC_PI_2).unwrap()
    }

    fn scene() -> SceneParams {
        SceneParams { camera_height: 3.0 }
    }

    #[test]
    fn nadir_person_is_a_centered_disk() {
        let c = cam();
        let b = project_cylinder(&CylinderPerson::new(0.0, 0.0, 1.7, 0.5), &scene(), &c).unwrap();
        assert_eq!((b.center_x, b.center_y), (500.0, 500.0));
        let top_radius = 500.0 * (0.25f64 / 1.3).atan() / FRAC_PI_2;
        assert_abs_diff_eq!(b.width, 2.0 * top_radius, epsilon = 1e-9);
        assert_abs_diff_eq!(b.height, 2.0 * top_radius, epsilon = 1e-9);
    }

    /// Projects uniformly random points of the cylinder surface (wall, top and
    /// bottom disks) and fits the box with the known radial anchor.
    fn monte_carlo_box(person: &CylinderPerson, sc: &SceneParams, c: &FisheyeCamera, n: usize) -> PolarBox {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = person.diameter / 2.0;
        let az = person.ground_y.atan2(person.ground_x);
        let u = Vector2::new(az.cos(), az.sin());
        let v = Vector2::new(-u.y, u.x);
        let (mut rmin, mut rmax, mut tmin, mut tmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        let wall = TAU * rho * person.height;
        let disk = std::f64::consts::PI * rho * rho;
        for _ in 0..n {
            let pick = rng.random_range(0.0..wall + 2.0 * disk);
            let (a, z, rr) = if pick < wall {
                (rng.random_range(0.0..TAU), rng.random_range(0.0..person.height), rho)
            } else {
                let z = if pick < wall + disk { 0.0 } else { person.height };
                (rng.random_range(0.0..TAU), z, rho * rng.random_range(0.0f64..1.0).sqrt())
            };
            let p = Vector3::new(person.ground_x + rr * a.cos(), person.ground_y + rr * a.sin(), sc.camera_height - z);
            let (x, y, _) = c.project_unchecked(&p);
            let d = Vector2::new(x - c.center_x, y - c.center_y);
            let (r, t) = (d.dot(&u), d.dot(&v));
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            tmin = tmin.min(t);
            tmax = tmax.max(t);
        }
        let ctr = c.center() + u * (0.5 * (rmin + rmax)) + v * (0.5 * (tmin + tmax));
        PolarBox::new(ctr.x, ctr.y, tmax - tmin, rmax - rmin)
    }

    #[test]
    fn matches_monte_carlo_projection() {
        let c = cam();
        let sc = scene();
        let person = CylinderPerson::new(2.0 * 0.6f64.cos(), 2.0 * 0.6f64.sin(), 1.7, 0.5);
        let b = project_cylinder(&person, &sc, &c).unwrap();
        let oracle = monte_carlo_box(&person, &sc, &c, 1_000_000);
        for (a, o) in b.to_vec4().iter().zip(oracle.to_vec4()) {
            assert!((a - o).abs() < 1.0, "analytic {b:?} vs oracle {oracle:?}");
        }
    }

    #[test]
    fn outline_density_has_converged() {
        let c = cam();
        let sc = scene();
        for d in [0.3, 1.0, 2.5, 5.0, 12.0] {
            let person = CylinderPerson::new(d, 0.0, 1.7, 0.5);
            let a = project_cylinder(&person, &sc, &c).unwrap();
            let dense = OutlineDensity {
                azimuth: 2 * AZIMUTH_SAMPLES,
                edge: 2 * EDGE_SAMPLES,
            };
            let b = project_cylinder_with(&person, &sc, &c, dense).unwrap();
            for (x, y) in a.to_vec4().iter().zip(b.to_vec4()) {
                assert!((x - y).abs() < 0.2, "d = {d}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn size_curve_is_smooth_and_shrinks_towards_the_rim() {
        let c = cam();
        let sc = scene();
        let mut prev: Option<PolarBox> = None;
        let mut radii = Vec::new();
        let mut heights = Vec::new();
        for k in 1..400 {
            let d = 0.05 * k as f64;
            let b = project_cylinder(&CylinderPerson::new(d, 0.0, 1.7, 0.5), &sc, &c).unwrap();
            let r = b.center_x - 500.0;
            if let Some(p) = prev {
                assert!(r > p.center_x - 500.0, "center radius must increase");
                assert!((b.height - p.height).abs() < 8.0 && (b.width - p.width).abs() < 8.0);
            }
            radii.push(r);
            heights.push(b.height);
            prev = Some(b);
        }
        assert!(*radii.last().unwrap() < 500.0);
        let peak = heights.iter().cloned().fold(0.0, f64::max);
        assert!(*heights.last().unwrap() < 0.2 * peak);
    }

    #[test]
    fn projection_is_rotationally_symmetric() {
        let c = cam();
        let sc = scene();
        let base = project_cylinder(&CylinderPerson::new(1.8, 0.0, 1.5, 0.45), &sc, &c).unwrap();
        for k in 1..12 {
            let a = 0.5 * k as f64;
            let p = CylinderPerson::new(1.8 * a.cos(), 1.8 * a.sin(), 1.5, 0.45);
            let b = project_cylinder(&p, &sc, &c).unwrap();
            let az = (b.center_y - 500.0).atan2(b.center_x - 500.0);
            let diff = (az - a).rem_euclid(TAU);
            assert!(diff.min(TAU - diff) < 1e-6);
            assert!((b.width - base.width).abs() < 1e-6 && (b.height - base.height).abs() < 1e-6);
            assert!(b.height > 0.0 && b.height <= 1000.0);
        }
    }

    #[test]
    fn invalid_inputs() {
        let c = cam();
        assert!(project_cylinder(&CylinderPerson::new(1.0, 0.0, 3.5, 0.5), &scene(), &c).is_err());
        let narrow = FisheyeCamera::centered(1000, 1000, 500.0, 30f64.to_radians()).unwrap();
        let far = CylinderPerson::new(20.0, 0.0, 1.7, 0.5);
        assert!(matches!(project_cylinder(&far, &scene(), &narrow), Err(Error::OutOfView)));
    }

    #[test]
    fn default_grid_has_twelve_sets() {
        let g = default_parameter_grid();
        assert_eq!(g.len(), 12);
        for cam_h in [2.75, 3.25] {
            for h in [1.3, 1.5, 1.7] {
                for d in [0.45, 0.6] {
                    assert!(g.iter().any(|p| p.camera_height == cam_h && p.person_height == h && p.diameter == d));
                }
            }
        }
    }

    #[test]
    fn target_spacing_honours_overlap() {
        let c = cam();
        let params = ParameterSet {
            camera_height: 3.0,
            person_height: 1.7,
            diameter: 0.5,
        };
        let set = generate_target_boxes(&params, &c, &TargetSampling::default()).unwrap();
        assert!(set.rings.len() > 10);
        for w in set.rings.windows(2) {
            let spacing = w[1].center_radius - w[0].center_radius;
            assert!(spacing > 0.0);
            assert!(spacing <= 0.2 * w[0].height.min(w[1].height) + 1e-6);
        }
        for ring in &set.rings[1..] {
            assert_eq!(ring.count % 8, 0);
            let arc = TAU * ring.center_radius / ring.count as f64;
            assert!(arc <= 0.2 * ring.width + 1e-9);
            assert!(ring.height >= 20.0);
        }
        assert_eq!(set.boxes.len(), set.rings.iter().map(|r| r.count).sum::<usize>());

        let sparse = generate_target_boxes(&params, &c, &TargetSampling { overlap: 0.2, ..Default::default() }).unwrap();
        assert!(sparse.boxes.len() * 10 < set.boxes.len());
        for w in sparse.rings.windows(2) {
            assert!(w[1].center_radius - w[0].center_radius <= 0.8 * w[0].height.min(w[1].height) + 1e-6);
        }
        assert!(generate_target_boxes(&params, &c, &TargetSampling { overlap: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn target_file_round_trip() {
        let c = cam();
        let params = ParameterSet {
            camera_height: 2.75,
            person_height: 1.5,
            diameter: 0.45,
        };
        let set = generate_target_boxes(&params, &c, &TargetSampling::default()).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf, c.center()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("angle_rad"));
        let back = TargetBoxSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.boxes.len(), set.boxes.len());
        assert_eq!(back.rings.iter().map(|r| r.count).collect::<Vec<_>>(), set.rings.iter().map(|r| r.count).collect::<Vec<_>>());
        for (a, b) in back.boxes.iter().zip(&set.boxes) {
            assert_eq!(a.to_vec4(), b.to_vec4());
        }
        let truncated: Vec<u8> = text.lines().take(3).collect::<Vec<_>>().join("\n").into_bytes();
        assert!(TargetBoxSet::read_from(truncated.as_slice()).is_err());
    }
}
