use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::gaussian::{build_covariance, normalize_quat, Gaussian3D, IDENTITY_QUAT};
use super::RenderConfig;
use crate::geometry::{CameraIntrinsics, CameraPose};

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian2D {
    /// Index of the source Gaussian in the cloud.
    pub index: usize,
    pub mean: Vector2<f64>,
    /// Σ′ including the blur floor.
    pub cov: Matrix2<f64>,
    /// Σ′⁻¹.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Half-width of the pixel square that can receive a contribution.
    pub radius: f64,
    /// Mean in camera coordinates.
    pub(crate) cam_mean: Vector3<f64>,
}

/// Largest Mahalanobis radius considered when the alpha cutoff is disabled.
const MAX_SIGMA_EXTENT: f64 = 10.0;

/// Multiple of the major standard deviation outside which `opacity * exp(-r²/2)`
/// drops below `min_alpha`, but never less than 3.
pub(crate) fn sigma_extent(opacity: f64, min_alpha: f64) -> f64 {
    if min_alpha <= 0.0 {
        return MAX_SIGMA_EXTENT;
    }
    let k2 = 2.0 * (opacity / min_alpha).ln();
    k2.max(0.0).sqrt().clamp(3.0, MAX_SIGMA_EXTENT)
}

/// 2×3 Jacobian of the pinhole projection at camera-space point `t`.
pub(crate) fn projection_jacobian(t: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * t.x * iz * iz, 0.0, k.fy * iz, -k.fy * t.y * iz * iz)
}

pub(crate) fn unit_rotation(g: &Gaussian3D) -> [f64; 4] {
    normalize_quat(&g.rotation).unwrap_or(IDENTITY_QUAT)
}

/// Projects `g` into the view; `None` when it is culled.
pub fn project_gaussian(
    g: &Gaussian3D,
    view: &CameraPose,
    k: &CameraIntrinsics,
    config: &RenderConfig,
) -> Option<ProjectedGaussian2D> {
    project_indexed(0, g, view, k, config)
}

pub(crate) fn project_indexed(
    index: usize,
    g: &Gaussian3D,
    view: &CameraPose,
    k: &CameraIntrinsics,
    config: &RenderConfig,
) -> Option<ProjectedGaussian2D> {
    if !(g.opacity >= config.min_alpha) || g.opacity <= 0.0 {
        return None;
    }
    let w: &Matrix3<f64> = view.rotation();
    let t = view.to_camera(&g.mean);
    if !(t.z > config.near_plane) {
        return None;
    }
    let mean = Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy);
    let j = projection_jacobian(&t, k);
    let m = j * w;
    let sigma = build_covariance(&unit_rotation(g), &g.scale);
    let mut cov = m * sigma * m.transpose();
    cov[(0, 1)] = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(1, 0)] = cov[(0, 1)];
    cov[(0, 0)] += config.blur_floor;
    cov[(1, 1)] += config.blur_floor;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(0, 1)], cov[(0, 0)]) / det;
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    // slack keeps boundary pixels from being lost to rounding
    let radius = lambda_max.sqrt() * sigma_extent(g.opacity, config.min_alpha) * (1.0 + 1e-9) + 1e-9;
    let (wf, hf) = ((k.width - 1) as f64, (k.height - 1) as f64);
    if mean.x + radius < 0.0 || mean.x - radius > wf || mean.y + radius < 0.0 || mean.y - radius > hf {
        return None;
    }
    if !mean.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(ProjectedGaussian2D {
        index,
        mean,
        cov,
        conic,
        depth: t.z,
        color: g.color,
        opacity: g.opacity,
        radius,
        cam_mean: t,
    })
}
