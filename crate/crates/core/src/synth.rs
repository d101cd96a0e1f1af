//! Synthetic top-view scenes of cylinder people: ray-cast fisheye renderings,
//! analytic ground truth and a perfect patch-frame detector.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxmap::PatchDetection;
use crate::compositor::CompositeLayout;
use crate::error::{Error, Result};
use crate::evaluation::GroundTruth;
use crate::geometry::{FisheyeCamera, PatchProjector};
use crate::person_model::{project_cylinder, CylinderPerson, SceneParams};
use crate::raster::Raster;
use crate::rotrect::{AxisBox, PolarBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePerson {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub diameter: f64,
    pub gray: u8,
}

impl ScenePerson {
    pub fn cylinder(&self) -> CylinderPerson {
        CylinderPerson::new(self.x, self.y, self.height, self.diameter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub camera_height: f64,
    pub persons: Vec<ScenePerson>,
    pub background: u8,
    /// Square image size in pixels; when set it must match the camera.
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SyntheticScene {
    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            camera_height: self.camera_height,
        }
    }

    pub fn validate(&self, cam: &FisheyeCamera) -> Result<()> {
        if !(self.camera_height > 0.0) {
            return Err(Error::Config(format!("camera height must be positive, got {}", self.camera_height)));
        }
        if let Some(r) = self.resolution {
            if r != cam.width || r != cam.height {
                return Err(Error::Config(format!(
                    "scene resolution {r} does not match camera image {}x{}",
                    cam.width, cam.height
                )));
            }
        }
        for (i, p) in self.persons.iter().enumerate() {
            if !(p.height > 0.0 && p.height < self.camera_height && p.diameter > 0.0) {
                return Err(Error::Data(format!("person {i} has invalid size")));
            }
            for q in &self.persons[..i] {
                if (p.x - q.x).hypot(p.y - q.y) < 0.5 * (p.diameter + q.diameter) {
                    return Err(Error::Data(format!("person {i} intersects another person")));
                }
            }
        }
        Ok(())
    }
}

/// Rendered frame: gray image, per-pixel person label (0 = none, k + 1 = person k)
/// and analytic ground truth.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub image: Raster,
    pub labels: Vec<u16>,
    /// Analytic box of every scene person, `None` when out of view.
    pub person_boxes: Vec<Option<PolarBox>>,
    pub ground_truth: GroundTruth,
}

impl Rendering {
    pub fn label(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.image.width + x]
    }
}

/// Distance along unit ray `d` (camera at the origin, z toward the floor) to
/// the cylinder of `p`, if hit.
fn hit_cylinder(d: &Vector3<f64>, p: &ScenePerson, camera_height: f64) -> Option<f64> {
    let rad = 0.5 * p.diameter;
    let top = camera_height - p.height;
    let mut best: Option<f64> = None;
    // Side wall.
    let a = d.x * d.x + d.y * d.y;
    if a > 0.0 {
        let b = -2.0 * (d.x * p.x + d.y * p.y);
        let c = p.x * p.x + p.y * p.y - rad * rad;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = t * d.z;
                if t > 0.0 && z >= top && z <= camera_height {
                    best = Some(best.map_or(t, |v: f64| v.min(t)));
                }
            }
        }
    }
    // Head disk.
    if d.z > 0.0 {
        let t = top / d.z;
        let (x, y) = (t * d.x - p.x, t * d.y - p.y);
        if x * x + y * y <= rad * rad {
            best = Some(best.map_or(t, |v: f64| v.min(t)));
        }
    }
    best
}

/// Label of the first person hit by the ray, or 0.
fn first_hit(d: &Vector3<f64>, scene: &SyntheticScene) -> u16 {
    let mut best = (f64::INFINITY, 0u16);
    for (k, p) in scene.persons.iter().enumerate() {
        if let Some(t) = hit_cylinder(d, p, scene.camera_height) {
            if t < best.0 {
                best = (t, k as u16 + 1);
            }
        }
    }
    best.1
}

/// Ray-casts every pixel center inside the image circle. Pixels outside the
/// circle are black.
pub fn render_fisheye(scene: &SyntheticScene, cam: &FisheyeCamera, image_id: &str) -> Result<Rendering> {
    scene.validate(cam)?;
    let (w, h) = (cam.width, cam.height);
    let labels: Vec<u16> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if !cam.contains(fx, fy) {
                    return u16::MAX;
                }
                first_hit(&cam.ray_unchecked(fx, fy), scene)
            })
        })
        .collect();
    let mut image = Raster::new(w, h, 1);
    for (px, &l) in image.data.iter_mut().zip(&labels) {
        *px = match l {
            u16::MAX => 0,
            0 => scene.background,
            k => scene.persons[k as usize - 1].gray,
        };
    }
    let labels = labels.into_iter().map(|l| if l == u16::MAX { 0 } else { l }).collect();
    let sp = scene.scene_params();
    let person_boxes = scene
        .persons
        .iter()
        .map(|p| match project_cylinder(&p.cylinder(), &sp, cam) {
            Ok(b) => Ok(Some(b)),
            Err(Error::OutOfView) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rendering {
        image,
        labels,
        ground_truth: GroundTruth {
            image_id: image_id.to_string(),
            boxes: person_boxes.iter().flatten().copied().collect(),
        },
        person_boxes,
    })
}

/// Adds zero-mean Gaussian noise to a rendering, seeded.
pub fn add_noise(image: &mut Raster, sigma: f64, seed: u64) -> Result<()> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in image.data.iter_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfectDetection {
    pub person: usize,
    pub detection: PatchDetection,
    /// Fraction of the person's fisheye silhouette that lands inside the patch.
    pub visible_fraction: f64,
}

/// Tight patch boxes around each person's in-patch silhouette, emitted for
/// every patch that sees at least `min_visible` of the silhouette.
pub fn perfect_detections(
    render: &Rendering,
    cam: &FisheyeCamera,
    layout: &CompositeLayout,
    min_visible: f64,
) -> Result<Vec<PerfectDetection>> {
    let n_persons = render.person_boxes.len();
    if n_persons == 0 {
        return Ok(Vec::new());
    }
    let (w, h) = (cam.width, cam.height);
    let mut totals = vec![0usize; n_persons];
    for &l in &render.labels {
        if l > 0 {
            totals[l as usize - 1] += 1;
        }
    }
    let per_patch: Vec<Vec<PerfectDetection>> = (0..layout.n_patches)
        .into_par_iter()
        .map(|k| -> Result<Vec<PerfectDetection>> {
            let spec = layout.patch_spec(k);
            let proj = PatchProjector::new(&spec)?;
            // Forward: how much of each silhouette lands inside the patch.
            let mut inside = vec![0usize; n_persons];
            for y in 0..h {
                for x in 0..w {
                    let l = render.labels[y * w + x];
                    if l == 0 {
                        continue;
                    }
                    let ray = cam.ray_unchecked(x as f64 + 0.5, y as f64 + 0.5);
                    if proj.ray_to_pixel(&ray).inside().is_some() {
                        inside[l as usize - 1] += 1;
                    }
                }
            }
            // Backward: patch pixels whose source pixel shows the person.
            let mut boxes = vec![None::<AxisBox>; n_persons];
            for j in 0..spec.height_px {
                for i in 0..spec.width_px {
                    let ray = proj.pixel_to_ray(spec.col_to_rel(i as f64), spec.row_to_rel(j as f64));
                    let (x, y, _) = cam.project_unchecked(&ray);
                    if !cam.contains(x, y) || x < 0.0 || y < 0.0 {
                        continue;
                    }
                    let (xi, yi) = (x as usize, y as usize);
                    if xi >= w || yi >= h {
                        continue;
                    }
                    let l = render.labels[yi * w + xi];
                    if l == 0 {
                        continue;
                    }
                    let px = AxisBox::new(i as f64, j as f64, i as f64 + 1.0, j as f64 + 1.0);
                    let slot = &mut boxes[l as usize - 1];
                    *slot = Some(match slot {
                        Some(b) => AxisBox::new(b.x0.min(px.x0), b.y0.min(px.y0), b.x1.max(px.x1), b.y1.max(px.y1)),
                        None => px,
                    });
                }
            }
            Ok((0..n_persons)
                .filter_map(|p| {
                    let frac = inside[p] as f64 / totals[p].max(1) as f64;
                    let b = boxes[p]?;
                    (totals[p] > 0 && frac >= min_visible).then_some(PerfectDetection {
                        person: p,
                        detection: PatchDetection {
                            patch: k,
                            bbox: b,
                            score: 1.0,
                        },
                        visible_fraction: frac,
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_patch.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneConfig {
    pub camera_height: f64,
    pub min_persons: usize,
    pub max_persons: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub height_range: (f64, f64),
    pub diameter_range: (f64, f64),
    /// Minimum free ground gap between two persons, meters.
    pub clearance: f64,
    pub background: u8,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self {
            camera_height: 3.0,
            min_persons: 1,
            max_persons: 6,
            min_radius: 0.5,
            max_radius: 4.0,
            height_range: (1.5, 1.8),
            diameter_range: (0.45, 0.6),
            clearance: 0.3,
            background: 128,
        }
    }
}

/// Seeded random scene of non-intersecting persons.
pub fn random_scene(seed: u64, config: &RandomSceneConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(config.min_persons..=config.max_persons);
    let mut persons: Vec<ScenePerson> = Vec::with_capacity(n);
    let mut attempts = 0;
    while persons.len() < n && attempts < 10_000 {
        attempts += 1;
        let r = rng.random_range(config.min_radius..=config.max_radius);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let p = ScenePerson {
            x: r * a.cos(),
            y: r * a.sin(),
            height: rng.random_range(config.height_range.0..=config.height_range.1),
            diameter: rng.random_range(config.diameter_range.0..=config.diameter_range.1),
            gray: rng.random_range(10..=90),
        };
        let clear = persons
            .iter()
            .all(|q| (p.x - q.x).hypot(p.y - q.y) >= 0.5 * (p.diameter + q.diameter) + config.clearance);
        if clear {
            persons.push(p);
        }
    }
    SyntheticScene {
        camera_height: config.camera_height,
        persons,
        background: config.background,
        resolution: None,
        seed: Some(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::person_model::enclosing_polar_box;
    use crate::rotrect::iou_rotated;
    use nalgebra::Point2;
    use std::f64::consts::FRAC_PI_2;

    fn cam() -> FisheyeCamera {
        FisheyeCamera::centered(400, 400, 200.0, FRAC_PI_2).unwrap()
    }

    fn one(x: f64, y: f64) -> SyntheticScene {
        SyntheticScene {
            camera_height: 3.0,
            persons: vec![ScenePerson {
                x,
                y,
                height: 1.7,
                diameter: 0.5,
                gray: 30,
            }],
            background: 128,
            resolution: None,
            seed: None,
        }
    }

    #[test]
    fn empty_scene_is_uniform() {
        let c = cam();
        let s = SyntheticScene {
            persons: vec![],
            ..one(0.0, 0.0)
        };
        let r = render_fisheye(&s, &c, "e").unwrap();
        assert!(r.ground_truth.boxes.is_empty());
        for y in 0..400 {
            for x in 0..400 {
                let v = r.image.pixel(x, y)[0];
                assert_eq!(v, if c.contains(x as f64 + 0.5, y as f64 + 0.5) { 128 } else { 0 });
            }
        }
    }

    #[test]
    fn nadir_person_is_a_centered_disk() {
        let c = cam();
        let r = render_fisheye(&one(0.0, 0.0), &c, "n").unwrap();
        let pts: Vec<(f64, f64)> = (0..400 * 400)
            .filter(|&i| r.labels[i] == 1)
            .map(|i| ((i % 400) as f64 + 0.5, (i / 400) as f64 + 0.5))
            .collect();
        let n = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        assert!((mx - 200.0).abs() < 0.1 && (my - 200.0).abs() < 0.1);
        let rmax = pts.iter().map(|p| (p.0 - 200.0).hypot(p.1 - 200.0)).fold(0.0, f64::max);
        // Head disk radius: 0.25 m seen from 1.3 m above.
        let want = 200.0 * (0.25f64 / 1.3).atan() / FRAC_PI_2;
        assert!((rmax - want).abs() < 1.0, "{rmax} vs {want}");
    }

    #[test]
    fn silhouette_box_agrees_with_analytic_box() {
        let c = cam();
        for (x, y) in [(1.0, 0.5), (-2.0, 1.0), (0.3, -3.0)] {
            let r = render_fisheye(&one(x, y), &c, "s").unwrap();
            let pts: Vec<Point2<f64>> = (0..400 * 400)
                .filter(|&i| r.labels[i] == 1)
                .map(|i| Point2::new((i % 400) as f64 + 0.5, (i / 400) as f64 + 0.5))
                .collect();
            let blob = enclosing_polar_box(&pts, c.center()).unwrap();
            let iou = iou_rotated(&blob, &r.ground_truth.boxes[0], c.center());
            assert!(iou >= 0.9, "({x}, {y}): {iou}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let c = cam();
        let s = random_scene(7, &RandomSceneConfig::default());
        let a = render_fisheye(&s, &c, "a").unwrap();
        let b = render_fisheye(&s, &c, "a").unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn random_scenes_respect_bounds() {
        let cfg = RandomSceneConfig::default();
        for seed in 0..50 {
            let s = random_scene(seed, &cfg);
            assert!((1..=6).contains(&s.persons.len()));
            assert!(s.validate(&cam()).is_ok());
            for p in &s.persons {
                let r = p.x.hypot(p.y);
                assert!((0.5..=4.0).contains(&r));
            }
        }
        assert_eq!(random_scene(3, &cfg), random_scene(3, &cfg));
    }

    #[test]
    fn centered_person_is_seen_by_several_patches() {
        let c = cam();
        let layout = CompositeLayout::default();
        let r = render_fisheye(&one(0.0, 0.0), &c, "c").unwrap();
        let d = perfect_detections(&r, &c, &layout, 0.3).unwrap();
        assert!(d.len() >= 2, "{}", d.len());
        assert!(d.iter().all(|x| x.detection.score == 1.0 && x.visible_fraction >= 0.3));
    }

    #[test]
    fn person_outside_the_circle_is_not_detected() {
        let c = FisheyeCamera::centered(400, 400, 200.0, 1.0).unwrap();
        let r = render_fisheye(&one(30.0, 0.0), &c, "o").unwrap();
        assert!(r.labels.iter().all(|&l| l == 0));
        assert!(perfect_detections(&r, &c, &CompositeLayout::default(), 0.3).unwrap().is_empty());
    }

    #[test]
    fn resolution_mismatch_is_a_config_error() {
        let s = SyntheticScene {
            resolution: Some(512),
            ..one(1.0, 1.0)
        };
        assert!(render_fisheye(&s, &cam(), "x").unwrap_err().is_config());
    }
}
