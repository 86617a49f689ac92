//! Procedural test scenes with exactly known geometry.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{project_point, Camera, DepthMap, CameraIntrinsics, CameraPose, RectifiedPair};
use crate::grid::{gaussian_blur, ColorImage, Grid, Mask};
use crate::render::{normalize_quat, render, Gaussian3D, GaussianCloud, RenderConfig};

/// Blurred uniform noise per channel, rescaled to span [0, 1].
pub fn noise_texture(width: usize, height: usize, blur_sigma: f64, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels: Vec<Grid<f64>> = (0..3)
        .map(|_| {
            let raw = Grid::from_fn(width, height, |_, _| rng.gen_range(0.0..1.0));
            let g = gaussian_blur(&raw, blur_sigma);
            let (lo, hi) = g.min_max();
            g.map(|v| (v - lo) / (hi - lo).max(1e-12))
        })
        .collect();
    Grid::from_fn(width, height, |x, y| [*channels[0].get(x, y), *channels[1].get(x, y), *channels[2].get(x, y)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub baseline: f64,
    pub depth: f64,
    pub texture_sigma: f64,
    pub seed: u64,
}

impl Default for PlaneSpec {
    fn default() -> Self {
        Self { width: 512, height: 512, fx: 1000.0, baseline: 0.1, depth: 2.0, texture_sigma: 3.0, seed: 0 }
    }
}

impl PlaneSpec {
    pub fn disparity(&self) -> f64 {
        self.fx * self.baseline / self.depth
    }
}

/// Rectified pair viewing a textured fronto-parallel plane, with the true
/// disparity of each view and where it is defined (the point is seen by both
/// cameras).
#[derive(Clone, Debug)]
pub struct PlaneStereo {
    pub pair: RectifiedPair,
    pub left_disparity: Grid<f64>,
    pub right_disparity: Grid<f64>,
    pub left_visible: Mask,
    pub right_visible: Mask,
}

/// The left camera sits at the origin and the right one at `(baseline, 0, 0)`,
/// both looking down `+z`. The plane texture is attached to world `x`, so
/// `right(u) = left(u + d)`.
pub fn plane_stereo_pair(spec: &PlaneSpec) -> Result<PlaneStereo> {
    let (w, h) = (spec.width, spec.height);
    let d = spec.disparity();
    let margin = 4usize;
    let tex = noise_texture(w + d.ceil() as usize + 2 * margin, h, spec.texture_sigma, spec.seed);
    let sample = |u: f64, y: usize| tex.sample_bilinear(u + margin as f64, y as f64).expect("texture covers the view");
    let left_image = Grid::from_fn(w, h, |x, y| sample(x as f64, y));
    let right_image = Grid::from_fn(w, h, |x, y| sample(x as f64 + d, y));
    let intrinsics = CameraIntrinsics::new(spec.fx, spec.fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)?;
    let left_pose = CameraPose::identity();
    let right_pose = CameraPose::from_center(Matrix3::identity(), Vector3::new(spec.baseline, 0.0, 0.0))?;
    let all = Grid::filled(w, h, true);
    Ok(PlaneStereo {
        pair: RectifiedPair {
            left_image,
            right_image,
            left_valid: all.clone(),
            right_valid: all,
            intrinsics,
            baseline: spec.baseline,
            left_homography: Matrix3::identity(),
            right_homography: Matrix3::identity(),
            left_pose,
            right_pose,
        },
        left_disparity: Grid::filled(w, h, d),
        right_disparity: Grid::filled(w, h, d),
        left_visible: Grid::from_fn(w, h, |x, _| x as f64 - d >= 0.0),
        right_visible: Grid::from_fn(w, h, |x, _| x as f64 + d <= (w - 1) as f64),
    })
}

/// A wavy textured sheet of Gaussians seen by three cameras on an arc.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArcSceneSpec {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Camera distance from the origin, which all cameras look at.
    pub radius: f64,
    /// Distance between the two outer cameras.
    pub baseline: f64,
    /// Gaussian spacing in pixels of the middle view.
    pub spacing_px: f64,
    /// Amplitude of the sheet's depth relief.
    pub relief: f64,
    /// Texture blur in units of the Gaussian spacing.
    pub texture_sigma: f64,
    pub seed: u64,
}

impl Default for ArcSceneSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 192,
            fov_deg: 60.0,
            radius: 2.0,
            baseline: 0.12,
            spacing_px: 1.2,
            relief: 0.08,
            texture_sigma: 2.0,
            seed: 0,
        }
    }
}

impl ArcSceneSpec {
    /// Angle of the outer cameras from the middle one.
    pub fn half_angle(&self) -> f64 {
        (self.baseline / (2.0 * self.radius)).asin()
    }

    /// Camera on the arc at `angle` radians, looking at the origin.
    pub fn camera_at(&self, angle: f64) -> Result<Camera> {
        let intrinsics = CameraIntrinsics::from_fov(self.fov_deg, self.width, self.height)?;
        let eye = Vector3::new(self.radius * angle.sin(), 0.0, -self.radius * angle.cos());
        Ok(Camera::new(intrinsics, CameraPose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0))?))
    }
}

#[derive(Clone, Debug)]
pub struct ArcScene {
    pub spec: ArcSceneSpec,
    pub cloud: GaussianCloud,
    /// Left, middle and right camera.
    pub cameras: [Camera; 3],
    /// Direct renders of `cloud` from `cameras`.
    pub images: [ColorImage; 3],
}

fn sheet_depth(spec: &ArcSceneSpec, x: f64, y: f64) -> (f64, f64, f64) {
    use std::f64::consts::TAU;
    let (kx, ky) = (TAU / 0.7, TAU / 0.55);
    let z = spec.relief * (kx * x).sin() * (ky * y).cos();
    let dzdx = spec.relief * kx * (kx * x).cos() * (ky * y).cos();
    let dzdy = -spec.relief * ky * (kx * x).sin() * (ky * y).sin();
    (z, dzdx, dzdy)
}

/// Cameras sit on a circle in the `xz` plane at angles `-a, 0, a`.
pub fn arc_scene(spec: &ArcSceneSpec, config: &RenderConfig) -> Result<ArcScene> {
    let intrinsics = CameraIntrinsics::from_fov(spec.fov_deg, spec.width, spec.height)?;
    let half = spec.half_angle();
    let cameras = [spec.camera_at(-half)?, spec.camera_at(0.0)?, spec.camera_at(half)?];

    let step = spec.spacing_px * spec.radius / intrinsics.fx;
    // wide enough for cameras out to three times the outer angle
    let reach = |pixels: usize, f: f64| 1.25 * (spec.radius + spec.relief) * (pixels as f64 / 2.0) / f + 2.0 * spec.baseline;
    let (ex, ey) = (reach(spec.width, intrinsics.fx), reach(spec.height, intrinsics.fy));
    let (nx, ny) = ((2.0 * ex / step).ceil() as usize, (2.0 * ey / step).ceil() as usize);
    let tex = noise_texture(nx, ny, spec.texture_sigma, spec.seed);
    let mut cloud = GaussianCloud::new();
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = (-ex + i as f64 * step, -ey + j as f64 * step);
            let (z, dzdx, dzdy) = sheet_depth(spec, x, y);
            // local z along the sheet normal
            let n = Vector3::new(-dzdx, -dzdy, 1.0).normalize();
            let q = normalize_quat(&[1.0 + n.z, -n.y, n.x, 0.0]).expect("normal has positive z");
            let c = tex.get(i, j);
            cloud.push(
                Gaussian3D {
                    mean: Vector3::new(x, y, z),
                    rotation: q,
                    scale: Vector3::new(0.8 * step, 0.8 * step, 0.05 * step),
                    color: Vector3::new(c[0], c[1], c[2]),
                    opacity: 1.0,
                },
                None,
            );
        }
    }
    let images = [
        render(&cloud.gaussians, &cameras[0], config)?.color,
        render(&cloud.gaussians, &cameras[1], config)?.color,
        render(&cloud.gaussians, &cameras[2], config)?.color,
    ];
    Ok(ArcScene { spec: *spec, cloud, cameras, images })
}

impl ArcScene {
    /// First intersection of the ray through pixel `(u, v)` with the sheet.
    pub fn surface_point(&self, camera: &Camera, u: f64, v: f64) -> Option<Vector3<f64>> {
        let c = *camera.pose.center();
        let d = camera.projection().ray(u, v);
        if d.z.abs() < 1e-6 {
            return None;
        }
        // fixed point on the ray parameter; the sheet is shallow so this contracts
        let mut t = -c.z / d.z;
        for _ in 0..100 {
            let p = c + t * d;
            let next = (sheet_depth(&self.spec, p.x, p.y).0 - c.z) / d.z;
            let done = (next - t).abs() < 1e-12;
            t = next;
            if done {
                break;
            }
        }
        let p = c + t * d;
        (t > 0.0 && (p.z - sheet_depth(&self.spec, p.x, p.y).0).abs() < 1e-9).then_some(p)
    }

    /// Ground-truth depth of the sheet seen from `camera`.
    pub fn surface_depth(&self, camera: &Camera) -> DepthMap {
        let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
        let p = camera.projection();
        let z = Grid::from_fn(w, h, |x, y| {
            self.surface_point(camera, x as f64, y as f64)
                .and_then(|q| project_point(&q, &p).ok())
                .map_or(0.0, |r| r.depth)
        });
        let valid = z.map(|&v| v > 0.0);
        DepthMap::new(z, valid).expect("sizes agree")
    }

    /// Pixels of `target` whose surface point is unoccluded and lies at least
    /// `margin` pixels inside the valid region of every source view.
    pub fn covisibility(&self, target: &Camera, sources: &[(Camera, &Mask)], margin: usize) -> Mask {
        let (w, h) = (target.intrinsics.width, target.intrinsics.height);
        let m = margin as isize;
        Grid::from_fn(w, h, |x, y| {
            let Some(p) = self.surface_point(target, x as f64, y as f64) else { return false };
            sources.iter().all(|(cam, valid)| {
                let Ok(r) = project_point(&p, &cam.projection()) else { return false };
                let (u, v) = (r.u.round() as isize, r.v.round() as isize);
                let inside = |a: isize, b: isize| {
                    a >= 0 && b >= 0 && (a as usize) < valid.width() && (b as usize) < valid.height() && *valid.get(a as usize, b as usize)
                };
                let clear = (-m..=m).all(|dy| (-m..=m).all(|dx| inside(u + dx, v + dy)));
                clear && self.surface_point(cam, r.u, r.v).is_some_and(|q| (q - p).norm() < 1e-6)
            })
        })
    }
}
