use nalgebra::{Matrix3, Vector3};

/// Quaternion stored as `(w, x, y, z)`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
}

impl Gaussian3D {
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, color: Vector3<f64>, opacity: f64) -> Self {
        Self { mean, rotation: IDENTITY_QUAT, scale: Vector3::repeat(sigma), color, opacity }
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        build_covariance(&self.rotation, &self.scale)
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.scale.iter()).chain(self.color.iter()).all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
    }
}

/// Which rectified source view (and pixel) a Gaussian was lifted from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceView {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceTag {
    pub view: SourceView,
    pub x: u32,
    pub y: u32,
}

/// A set of Gaussians with optional provenance tags (one per Gaussian).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian3D>,
    pub sources: Vec<Option<SourceTag>>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    /// Untagged cloud.
    pub fn from_gaussians(gaussians: Vec<Gaussian3D>) -> Self {
        let sources = vec![None; gaussians.len()];
        Self { gaussians, sources }
    }

    pub fn push(&mut self, g: Gaussian3D, source: Option<SourceTag>) {
        self.gaussians.push(g);
        self.sources.push(source);
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Union of both clouds; `self` first, no deduplication.
    pub fn extend_from(&mut self, other: &GaussianCloud) {
        self.gaussians.extend_from_slice(&other.gaussians);
        self.sources.extend_from_slice(&other.sources);
    }

    /// Unit quaternions, positive scales, opacities in [0,1], nothing NaN.
    pub fn is_well_formed(&self) -> bool {
        self.sources.len() == self.gaussians.len()
            && self.gaussians.iter().all(|g| {
                g.is_finite()
                    && (quat_norm(&g.rotation) - 1.0).abs() < 1e-6
                    && g.scale.iter().all(|&s| s > 0.0)
                    && (0.0..=1.0).contains(&g.opacity)
            })
    }
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Unit quaternion, or `None` for a (near) zero input.
pub fn normalize_quat(q: &Quat) -> Option<Quat> {
    let n = quat_norm(q);
    if !(n > 1e-12) || !n.is_finite() {
        return None;
    }
    Some([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Backpropagate `dL/dR` to the four quaternion components (no normalisation).
pub(crate) fn quat_matrix_vjp(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(s)`.
pub fn build_covariance(rotation: &Quat, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scale);
    let sigma = m * m.transpose();
    // exact symmetry
    (sigma + sigma.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_rotation_gives_diagonal() {
        let s = build_covariance(&IDENTITY_QUAT, &Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(s, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn quarter_turn_about_z_swaps_xx_yy() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = [h.cos(), 0.0, 0.0, h.sin()];
        let s = build_covariance(&q, &Vector3::new(1.0, 2.0, 1.0));
        let want = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((s - want).abs().max() < 1e-12);
    }

    #[test]
    fn quaternion_matrix_is_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = normalize_quat(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap();
            let r = quat_to_matrix(&q);
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quaternion_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Quat = [0.3, -0.5, 0.7, 0.2];
        let g = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let f = |q: &Quat| quat_to_matrix(q).component_mul(&g).sum();
        let analytic = quat_matrix_vjp(&q, &g);
        for i in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "component {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn zero_quaternion_does_not_normalize() {
        assert!(normalize_quat(&[0.0; 4]).is_none());
        assert_eq!(normalize_quat(&[2.0, 0.0, 0.0, 0.0]).unwrap(), IDENTITY_QUAT);
    }
}
