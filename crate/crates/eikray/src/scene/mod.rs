//! Cameras and ray generation, synthetic scene construction with known
//! ground-truth IoR, and refractive-box estimation from masks and depth.

pub mod dataset;

pub use dataset::{load_dataset, save_manifest, Dataset, Manifest, SplitRecord, ViewRecord};

use crate::fields::ea::{BackdropPlane, BackdropSet, LearnableEa, MaskedEa, Texture};
use crate::fields::ior::{softplus_inv, GaussianBlob, LuneburgLens, Refractive};
use crate::transport::{Exterior, ModelBundle, RefractiveBox};
use crate::Vec3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("camera basis is degenerate: up is parallel to the view direction")]
    DegenerateCamera,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("box estimation failed: {0}")]
    BoxEstimation(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

/// Pinhole camera; rays go through pixel centers of a `resolution` image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_y_degrees: f64,
    pub resolution: [usize; 2],
}

impl Camera {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fov_y_degrees > 0.0 && self.fov_y_degrees < 180.0) {
            return Err(SceneError::InvalidCamera(format!(
                "fov_y {} out of (0, 180)",
                self.fov_y_degrees
            )));
        }
        if self.resolution[0] == 0 || self.resolution[1] == 0 {
            return Err(SceneError::InvalidCamera("zero resolution".into()));
        }
        self.basis().map(|_| ())
    }

    /// Right-handed (right, up, forward) basis from look_at/up.
    pub fn basis(&self) -> Result<(Vec3, Vec3, Vec3), SceneError> {
        let position = Vec3::from(self.position);
        let forward = Vec3::from(self.look_at) - position;
        if forward.norm() == 0.0 {
            return Err(SceneError::DegenerateCamera);
        }
        let forward = forward.normalize();
        let right = forward.cross(&Vec3::from(self.up));
        if right.norm() < 1e-9 {
            return Err(SceneError::DegenerateCamera);
        }
        let right = right.normalize();
        let cam_up = right.cross(&forward);
        Ok((right, cam_up, forward))
    }

    /// Ray through continuous image coordinates, origin at the top-left
    /// corner; (w/2, h/2) is the optical axis and y grows downward.
    pub fn ray_through(&self, x: f64, y: f64) -> (Vec3, Vec3) {
        let (right, cam_up, forward) = self.basis().expect("validated camera");
        let (w, h) = (self.resolution[0] as f64, self.resolution[1] as f64);
        let tan_half = (self.fov_y_degrees.to_radians() * 0.5).tan();
        let aspect = w / h;
        let u = (2.0 * x / w - 1.0) * tan_half * aspect;
        let v = (1.0 - 2.0 * y / h) * tan_half;
        let dir = (forward + right * u + cam_up * v).normalize();
        (Vec3::from(self.position), dir)
    }

    /// Ray through the center of pixel (x, y).
    #[inline]
    pub fn pixel_ray(&self, x: usize, y: usize) -> (Vec3, Vec3) {
        self.ray_through(x as f64 + 0.5, y as f64 + 0.5)
    }

    pub fn pixel_count(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }
}

/// All per-pixel rays of a camera, row-major.
pub fn generate_rays(camera: &Camera) -> Result<Vec<(Vec3, Vec3)>, SceneError> {
    camera.validate()?;
    let (w, h) = (camera.resolution[0], camera.resolution[1]);
    let mut rays = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            rays.push(camera.pixel_ray(x, y));
        }
    }
    Ok(rays)
}

/// Ground-truth IoR field of a synthetic scene.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GtIorSpec {
    Vacuum,
    GaussianBlob {
        center: [f64; 3],
        amplitude: f64,
        radius: f64,
    },
    Luneburg {
        center: [f64; 3],
        radius: f64,
    },
}

/// Realized ground-truth IoR field.
#[derive(Debug, Clone, Copy)]
pub enum GtIorField {
    Vacuum,
    Blob(GaussianBlob),
    Luneburg(LuneburgLens),
}

impl Refractive for GtIorField {
    fn ior(&self, p: Vec3) -> f64 {
        match self {
            GtIorField::Vacuum => 1.0,
            GtIorField::Blob(b) => b.ior(p),
            GtIorField::Luneburg(l) => l.ior(p),
        }
    }
    fn ior_gradient(&self, p: Vec3) -> Vec3 {
        match self {
            GtIorField::Vacuum => Vec3::zeros(),
            GtIorField::Blob(b) => b.ior_gradient(p),
            GtIorField::Luneburg(l) => l.ior_gradient(p),
        }
    }
}

impl GtIorField {
    /// Sphere enclosing the visually significant support, used for synthetic
    /// depth maps.
    pub fn support_sphere(&self) -> Option<(Vec3, f64)> {
        match self {
            GtIorField::Vacuum => None,
            GtIorField::Blob(b) => Some((b.center, 2.5 * b.radius)),
            GtIorField::Luneburg(l) => Some((l.center, l.radius)),
        }
    }
}

/// Textured plane in the scene description.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub texture: Texture,
    pub sigma: f64,
    pub half_thickness: f64,
    pub half_extent: Option<(f64, f64)>,
}

/// Opaque cylinder placed inside the refractive box (interior content).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StickSpec {
    pub base: [f64; 3],
    pub tip: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
    pub sigma: f64,
}

/// Camera orbit: evenly spaced azimuths at a fixed elevation, looking at a
/// common target.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OrbitSpec {
    pub count: usize,
    pub radius: f64,
    pub elevation_degrees: f64,
    pub look_at: [f64; 3],
    pub fov_y_degrees: f64,
    pub resolution: [usize; 2],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub planes: Vec<PlaneSpec>,
    pub ior: GtIorSpec,
    pub refr_box: RefractiveBox,
    pub orbit: OrbitSpec,
    pub interior: Option<StickSpec>,
    /// World domain covered by background grids (baking and learning).
    pub bg_domain: RefractiveBox,
    pub far_bound: f64,
    /// Background-hit displacement (world units, measured at the far bound)
    /// above which a pixel is masked as refractive.
    pub mask_threshold: f64,
}

impl SceneSpec {
    /// Default synthetic scene: a Gaussian-blob lens over a checkered floor,
    /// 24 orbit cameras at 64x64.
    pub fn blob_lens() -> Self {
        let refr_box = RefractiveBox::new(Vec3::new(-0.45, -0.45, -0.45), Vec3::new(0.45, 0.45, 0.45));
        SceneSpec {
            name: "blob-lens".into(),
            planes: vec![PlaneSpec {
                point: [0.0, -0.7, 0.0],
                normal: [0.0, 1.0, 0.0],
                texture: Texture::ValueNoise {
                    scale: 0.38,
                    seed: 61,
                    color_a: [0.88, 0.42, 0.18],
                    color_b: [0.12, 0.4, 0.88],
                },
                sigma: 1e3,
                half_thickness: 0.125,
                half_extent: Some((3.4, 3.4)),
            }],
            ior: GtIorSpec::GaussianBlob {
                center: [0.0, 0.0, 0.0],
                amplitude: 0.08,
                radius: 0.18,
            },
            refr_box,
            orbit: OrbitSpec {
                count: 24,
                radius: 2.8,
                elevation_degrees: 28.0,
                look_at: [0.0, -0.12, 0.0],
                fov_y_degrees: 34.0,
                resolution: [64, 64],
            },
            interior: None,
            bg_domain: RefractiveBox::new(Vec3::new(-3.6, -1.0, -3.6), Vec3::new(3.6, 1.2, 3.6)),
            far_bound: 12.0,
            mask_threshold: 0.015,
        }
    }

    /// Same layout with the refraction removed (ground truth n = 1).
    pub fn no_refraction() -> Self {
        let mut spec = Self::blob_lens();
        spec.name = "no-refraction".into();
        spec.ior = GtIorSpec::Vacuum;
        spec
    }

    /// Blob lens with an opaque stick inside the refractive box.
    pub fn interior_stick() -> Self {
        let mut spec = Self::blob_lens();
        spec.name = "interior-stick".into();
        spec.interior = Some(StickSpec {
            base: [-0.05, -0.4, 0.05],
            tip: [0.12, 0.4, -0.08],
            radius: 0.07,
            color: [0.9, 0.8, 0.15],
            sigma: 220.0,
        });
        spec
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.orbit.count == 0 {
            return Err(SceneError::InvalidSpec("orbit.count is zero".into()));
        }
        if self.far_bound <= 0.0 {
            return Err(SceneError::InvalidSpec("far_bound must be positive".into()));
        }
        if let Some((c, r)) = self.gt_ior_field().support_sphere() {
            let inside = (0..3).all(|a| {
                c[a] - r >= self.refr_box.min[a] && c[a] + r <= self.refr_box.max[a]
            });
            if !inside {
                return Err(SceneError::InvalidSpec(
                    "refractive box does not contain the IoR support".into(),
                ));
            }
        }
        for cam in self.orbit_cameras() {
            cam.validate()?;
            if self.refr_box.contains(Vec3::from(cam.position)) {
                return Err(SceneError::InvalidSpec(
                    "camera inside the refractive box".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn gt_ior_field(&self) -> GtIorField {
        match self.ior {
            GtIorSpec::Vacuum => GtIorField::Vacuum,
            GtIorSpec::GaussianBlob {
                center,
                amplitude,
                radius,
            } => GtIorField::Blob(GaussianBlob {
                center: Vec3::from(center),
                amplitude,
                radius,
            }),
            GtIorSpec::Luneburg { center, radius } => GtIorField::Luneburg(LuneburgLens {
                center: Vec3::from(center),
                radius,
            }),
        }
    }

    pub fn orbit_cameras(&self) -> Vec<Camera> {
        let look_at = Vec3::from(self.orbit.look_at);
        let elev = self.orbit.elevation_degrees.to_radians();
        (0..self.orbit.count)
            .map(|i| {
                let az = 2.0 * std::f64::consts::PI * i as f64 / self.orbit.count as f64;
                let position = look_at
                    + Vec3::new(
                        self.orbit.radius * elev.cos() * az.cos(),
                        self.orbit.radius * elev.sin(),
                        self.orbit.radius * elev.cos() * az.sin(),
                    );
                Camera {
                    position: position.into(),
                    look_at: self.orbit.look_at,
                    up: [0.0, 1.0, 0.0],
                    fov_y_degrees: self.orbit.fov_y_degrees,
                    resolution: self.orbit.resolution,
                }
            })
            .collect()
    }
}

/// A realized synthetic scene: analytic fields plus cameras.
pub struct Scene {
    pub spec: SceneSpec,
    pub backdrops: MaskedEa<BackdropSet>,
    pub gt_ior: GtIorField,
    pub interior_gt: Option<LearnableEa>,
    pub cameras: Vec<Camera>,
}

/// Interior grids bake at this resolution and value scale.
pub const INTERIOR_DIMS: [usize; 3] = [48, 48, 48];
pub const INTERIOR_VALUE_SCALE: f64 = 400.0;

pub fn build_scene(spec: &SceneSpec) -> Result<Scene, SceneError> {
    spec.validate()?;
    let planes = spec
        .planes
        .iter()
        .map(|p| {
            let normal = Vec3::from(p.normal).normalize();
            let helper = if normal.x.abs() < 0.9 {
                Vec3::new(1.0, 0.0, 0.0)
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            };
            let tangent_u = (helper - normal * helper.dot(&normal)).normalize();
            let tangent_v = normal.cross(&tangent_u);
            BackdropPlane {
                point: Vec3::from(p.point),
                normal,
                tangent_u,
                tangent_v,
                half_thickness: p.half_thickness,
                sigma: p.sigma,
                texture: p.texture.clone(),
                half_extent: p.half_extent,
            }
        })
        .collect();
    let backdrops = MaskedEa::new(BackdropSet { planes }, Some(spec.refr_box));
    let interior_gt = spec.interior.as_ref().map(|stick| {
        let mut ea = LearnableEa::init_on_box(
            &spec.refr_box,
            INTERIOR_DIMS,
            INTERIOR_VALUE_SCALE,
            INTERIOR_VALUE_SCALE,
        );
        // Ground-truth bake: vacuum away from the stick.
        ea.raw_emission.values.fill(-30.0);
        ea.raw_absorption.values.fill(-30.0);
        let base = Vec3::from(stick.base);
        let tip = Vec3::from(stick.tip);
        let axis = tip - base;
        let len2 = axis.norm_squared();
        let inside = |p: Vec3| {
            let t = ((p - base).dot(&axis) / len2).clamp(0.0, 1.0);
            (p - (base + axis * t)).norm() <= stick.radius
        };
        let color = Vec3::from(stick.color);
        let sigma_raw = softplus_inv((stick.sigma / INTERIOR_VALUE_SCALE).max(1e-9)) as f32;
        let dims = ea.raw_absorption.dims;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = ea.raw_absorption.node_pos(i, j, k);
                    if inside(p) {
                        let idx = ea.raw_absorption.value_index(i, j, k, 0);
                        ea.raw_absorption.values[idx] = sigma_raw;
                        for c in 0..3 {
                            let q = (stick.sigma * color[c] / INTERIOR_VALUE_SCALE).max(1e-9);
                            let idx = ea.raw_emission.value_index(i, j, k, c);
                            ea.raw_emission.values[idx] = softplus_inv(q) as f32;
                        }
                    }
                }
            }
        }
        ea
    });
    Ok(Scene {
        spec: spec.clone(),
        backdrops,
        gt_ior: spec.gt_ior_field(),
        interior_gt,
        cameras: spec.orbit_cameras(),
    })
}

impl Scene {
    /// Forward model with the ground-truth fields (analytic exterior).
    pub fn gt_bundle(&self) -> ModelBundle<'_, GtIorField> {
        ModelBundle {
            ior: &self.gt_ior,
            exterior: Exterior::Analytic(&self.backdrops),
            interior: self.interior_gt.as_ref(),
            refr_box: Some(self.spec.refr_box),
        }
    }

    /// Same scene pretending there is no refraction (n = 1, no box).
    pub fn straight_bundle(&self) -> ModelBundle<'_, GtIorField> {
        ModelBundle {
            ior: &self.gt_ior,
            exterior: Exterior::Analytic(&self.backdrops),
            interior: None,
            refr_box: None,
        }
    }
}

/// Linear-interpolated percentile of unsorted data (type-7 estimator).
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Per-axis 0.02/0.98 percentile interval of the point cloud, scaled by 1.2
/// about its center.
pub fn estimate_box_from_points(points: &[Vec3]) -> Result<RefractiveBox, SceneError> {
    if points.is_empty() {
        return Err(SceneError::BoxEstimation("empty point cloud".into()));
    }
    let mut min = Vec3::zeros();
    let mut max = Vec3::zeros();
    for a in 0..3 {
        let mut vals: Vec<f64> = points.iter().map(|p| p[a]).collect();
        vals.sort_by(|x, y| x.total_cmp(y));
        let lo = percentile(&vals, 0.02);
        let hi = percentile(&vals, 0.98);
        let center = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo) * 1.2;
        if !(half > 0.0) {
            return Err(SceneError::BoxEstimation(format!(
                "degenerate interval on axis {a}: [{lo}, {hi}]"
            )));
        }
        min[a] = center - half;
        max[a] = center + half;
    }
    Ok(RefractiveBox::new(min, max))
}

/// Unprojects masked pixels through their per-pixel ray depth and estimates
/// the refractive box from the resulting cloud. `views` pairs a camera with a
/// row-major mask and depth map (parametric distance along the pixel ray).
pub fn estimate_box(
    views: &[(Camera, Vec<bool>, Vec<f32>)],
) -> Result<RefractiveBox, SceneError> {
    if views.is_empty() {
        return Err(SceneError::BoxEstimation("no views".into()));
    }
    let with_marks = views
        .iter()
        .filter(|(_, mask, _)| mask.iter().any(|&m| m))
        .count();
    if (with_marks as f64) < 0.1 * views.len() as f64 {
        return Err(SceneError::BoxEstimation(format!(
            "masks mark pixels on only {with_marks} of {} views",
            views.len()
        )));
    }
    let mut points = Vec::new();
    for (camera, mask, depth) in views {
        camera.validate()?;
        let (w, h) = (camera.resolution[0], camera.resolution[1]);
        assert_eq!(mask.len(), w * h, "mask size mismatch");
        assert_eq!(depth.len(), w * h, "depth size mismatch");
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let t = depth[i] as f64;
                if mask[i] && t.is_finite() && t > 0.0 {
                    let (o, d) = camera.pixel_ray(x, y);
                    points.push(o + d * t);
                }
            }
        }
    }
    estimate_box_from_points(&points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_camera(w: usize, h: usize) -> Camera {
        Camera {
            position: [0.0, 0.0, -2.0],
            look_at: [0.0, 0.0, 1.0],
            up: [0.0, 1.0, 0.0],
            fov_y_degrees: 90.0,
            resolution: [w, h],
        }
    }

    #[test]
    fn center_pixel_is_optical_axis() {
        let cam = test_camera(65, 65);
        let (_, d) = cam.pixel_ray(32, 32);
        let axis = (Vec3::from(cam.look_at) - Vec3::from(cam.position)).normalize();
        assert_relative_eq!((d - axis).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn corner_rays_symmetric() {
        let cam = test_camera(64, 64);
        let (_, tl) = cam.pixel_ray(0, 0);
        let (_, br) = cam.pixel_ray(63, 63);
        let (_, tr) = cam.pixel_ray(63, 0);
        let (_, bl) = cam.pixel_ray(0, 63);
        let axis = Vec3::new(0.0, 0.0, 1.0);
        assert_relative_eq!(tl.dot(&axis), br.dot(&axis), epsilon = 1e-12);
        assert_relative_eq!(tr.dot(&axis), bl.dot(&axis), epsilon = 1e-12);
    }

    #[test]
    fn top_edge_ray_at_45_degrees_for_fov_90() {
        let cam = test_camera(64, 64);
        let (_, d) = cam.ray_through(32.0, 0.0);
        let angle = d.dot(&Vec3::new(0.0, 0.0, 1.0)).acos().to_degrees();
        assert_relative_eq!(angle, 45.0, epsilon = 1e-9);
    }

    #[test]
    fn rays_unit_and_rescale_invariant() {
        let cam_lo = test_camera(16, 16);
        let cam_hi = test_camera(32, 32);
        for (x, y) in [(3usize, 5usize), (10, 2), (15, 15)] {
            let (_, d) = cam_lo.pixel_ray(x, y);
            assert!((d.norm() - 1.0).abs() < 1e-12);
            // The same pixel center in a 2x image sits at (2x+1, 2y+1)
            // in continuous coordinates.
            let (_, d2) = cam_hi.ray_through(2.0 * (x as f64 + 0.5), 2.0 * (y as f64 + 0.5));
            assert_relative_eq!((d - d2).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_camera_rejected() {
        let cam = Camera {
            position: [0.0, 0.0, 0.0],
            look_at: [0.0, 1.0, 0.0],
            up: [0.0, 1.0, 0.0],
            fov_y_degrees: 60.0,
            resolution: [8, 8],
        };
        assert!(matches!(cam.validate(), Err(SceneError::DegenerateCamera)));
    }

    #[test]
    fn percentile_box_matches_hand_computation() {
        let mut rng = StdRng::seed_from_u64(20240901);
        let points: Vec<Vec3> = (0..500_000)
            .map(|_| Vec3::new(rng.gen::<f64>(), rng.gen(), rng.gen()))
            .collect();
        let b = estimate_box_from_points(&points).unwrap();
        for a in 0..3 {
            assert!(
                (b.min[a] - (-0.076)).abs() < 1e-3,
                "axis {a} min {}",
                b.min[a]
            );
            assert!((b.max[a] - 1.076).abs() < 1e-3, "axis {a} max {}", b.max[a]);
        }
    }

    #[test]
    fn estimate_box_contains_bulk_of_points() {
        let mut rng = StdRng::seed_from_u64(7);
        let points: Vec<Vec3> = (0..20_000)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.3..0.9),
                    rng.gen_range(2.0..2.5),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let b = estimate_box_from_points(&points).unwrap();
        let inside = points.iter().filter(|p| b.contains(**p)).count();
        assert!(inside as f64 >= 0.96 * points.len() as f64);
    }

    #[test]
    fn outliers_do_not_blow_up_the_box() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut points: Vec<Vec3> = (0..10_000)
            .map(|_| Vec3::new(rng.gen::<f64>(), rng.gen(), rng.gen()))
            .collect();
        for _ in 0..100 {
            points.push(Vec3::new(100.0, -100.0, 100.0));
        }
        let b = estimate_box_from_points(&points).unwrap();
        for a in 0..3 {
            assert!(b.max[a] < 2.0, "axis {a} max {}", b.max[a]);
            assert!(b.min[a] > -2.0, "axis {a} min {}", b.min[a]);
        }
    }

    #[test]
    fn degenerate_cloud_rejected() {
        let points = vec![Vec3::new(0.5, 0.5, 0.5); 1000];
        assert!(matches!(
            estimate_box_from_points(&points),
            Err(SceneError::BoxEstimation(_))
        ));
    }

    #[test]
    fn blob_lens_spec_is_valid() {
        let spec = SceneSpec::blob_lens();
        spec.validate().unwrap();
        let scene = build_scene(&spec).unwrap();
        assert_eq!(scene.cameras.len(), 24);
        for cam in &scene.cameras {
            assert!(!spec.refr_box.contains(Vec3::from(cam.position)));
        }
    }

    #[test]
    fn interior_stick_bakes_opaque_core() {
        let spec = SceneSpec::interior_stick();
        let scene = build_scene(&spec).unwrap();
        let ea = scene.interior_gt.as_ref().unwrap();
        use crate::fields::ea::EaSource;
        let stick = spec.interior.as_ref().unwrap();
        let mid = (Vec3::from(stick.base) + Vec3::from(stick.tip)) * 0.5;
        assert!(ea.absorption(mid) > 0.5 * stick.sigma);
        let outside = Vec3::new(0.4, -0.4, -0.4);
        assert!(ea.absorption(outside) < 1.0);
    }
}
