use nalgebra::{Matrix3, Matrix3x4, Vector3};

use crate::error::{invalid, Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixels. Pixel centres sit at integer coordinates,
/// column `u` and row `v`. Lens distortion is assumed removed upstream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with square pixels from a horizontal field of view, principal point centred.
    pub fn from_fov(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(invalid(format!("field of view {fov_deg} deg out of (0, 180)")));
        }
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0), width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be non-zero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(invalid(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn from_matrix(k: &Matrix3<f64>, width: usize, height: usize) -> Result<Self> {
        if k[(1, 0)].abs() > 1e-12 || k[(2, 0)].abs() > 1e-12 || k[(2, 1)].abs() > 1e-12 || (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(invalid("K must be upper triangular with K[2][2] = 1"));
        }
        if k[(0, 1)].abs() > 1e-12 {
            return Err(invalid("skewed intrinsics are not supported"));
        }
        Self::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], width, height)
    }
}

/// World-to-camera rigid transform: `X_cam = R X_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    center: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(invalid(format!("rotation is not orthonormal (max |RᵀR - I| = {err:e})")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(invalid(format!("rotation determinant is {det}, expected 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("translation is not finite"));
        }
        let center = -(rotation.transpose() * translation);
        Ok(Self { rotation, translation, center })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), center: Vector3::zeros() }
    }

    /// Camera at `eye` looking at `target`. Image `y` points along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(invalid("look_at with eye == target"));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(invalid("look_at direction parallel to the up axis"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::from_center(rotation, eye)
    }

    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        Self::new(rotation, -(rotation * center))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

/// A calibrated camera: intrinsics plus pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn projection(&self) -> ProjectionMatrix {
        ProjectionMatrix::new(&self.intrinsics, &self.pose)
    }
}

/// `P = K [R | t]`, kept together with its factors so unprojection is exact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionMatrix {
    p: Matrix3x4<f64>,
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl ProjectionMatrix {
    pub fn new(k: &CameraIntrinsics, pose: &CameraPose) -> Self {
        let km = k.matrix();
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(pose.rotation());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(pose.translation());
        let k_inv = Matrix3::new(
            1.0 / k.fx,
            0.0,
            -k.cx / k.fx,
            0.0,
            1.0 / k.fy,
            -k.cy / k.fy,
            0.0,
            0.0,
            1.0,
        );
        Self { p: km * rt, k: km, k_inv, rotation: *pose.rotation(), translation: *pose.translation() }
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    pub fn intrinsic_matrix(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World-space direction whose camera depth component is one: `dX/dz` for a fixed pixel.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.rotation.transpose() * (self.k_inv * Vector3::new(u, v, 1.0))
    }
}

/// Pixel position and camera-space depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelDepth {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

pub fn project_point(x: &Vector3<f64>, p: &ProjectionMatrix) -> Result<PixelDepth> {
    let h = p.p * x.push(1.0);
    let depth = h.z;
    if !(depth > 0.0) {
        return Err(Error::BehindCamera { depth });
    }
    Ok(PixelDepth { u: h.x / depth, v: h.y / depth, depth })
}

/// Inverse of [`project_point`] for a known camera depth.
pub fn unproject_pixel(u: f64, v: f64, depth: f64, p: &ProjectionMatrix) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(invalid(format!("unprojection depth must be positive, got {depth}")));
    }
    let cam = p.k_inv * Vector3::new(u * depth, v * depth, depth);
    Ok(p.rotation.transpose() * (cam - p.translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        nalgebra::Rotation3::from_scaled_axis(axis).into_inner()
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn pose_rejects_non_rotations() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CameraPose::new(m, Vector3::zeros()).is_err());
        let s = Matrix3::identity() * 1.001;
        assert!(CameraPose::new(s, Vector3::zeros()).is_err());
    }

    #[test]
    fn camera_center_matches_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_rotation(&mut rng);
        let t = Vector3::new(0.3, -1.0, 2.0);
        let pose = CameraPose::new(r, t).unwrap();
        assert!((pose.center() + r.transpose() * t).norm() < 1e-12);
        assert!(pose.to_camera(pose.center()).norm() < 1e-12);
    }

    #[test]
    fn projection_matrix_is_k_rt() {
        let k = CameraIntrinsics::new(500.0, 510.0, 320.0, 240.0, 640, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = CameraPose::new(random_rotation(&mut rng), Vector3::new(0.1, 0.2, 0.3)).unwrap();
        let p = ProjectionMatrix::new(&k, &pose);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(pose.rotation());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(pose.translation());
        assert_eq!(*p.matrix(), k.matrix() * rt);
    }

    #[test]
    fn principal_point_unprojects_onto_axis() {
        let k = CameraIntrinsics::new(400.0, 400.0, 50.0, 40.0, 100, 80).unwrap();
        let p = ProjectionMatrix::new(&k, &CameraPose::identity());
        let x = unproject_pixel(50.0, 40.0, 1.0, &p).unwrap();
        assert!((x - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        let px = project_point(&Vector3::new(0.0, 0.0, 3.0), &p).unwrap();
        assert_eq!((px.u, px.v, px.depth), (50.0, 40.0, 3.0));
    }

    #[test]
    fn non_positive_depth_and_behind_camera_are_errors() {
        let k = CameraIntrinsics::new(400.0, 400.0, 50.0, 40.0, 100, 80).unwrap();
        let p = ProjectionMatrix::new(&k, &CameraPose::identity());
        assert!(matches!(unproject_pixel(1.0, 1.0, -1.0, &p), Err(Error::InvalidInput(_))));
        assert!(unproject_pixel(1.0, 1.0, 0.0, &p).is_err());
        assert!(matches!(project_point(&Vector3::new(0.0, 0.0, -1.0), &p), Err(Error::BehindCamera { .. })));
        assert!(project_point(&Vector3::new(1.0, 0.0, 0.0), &p).is_err());
    }

    #[test]
    fn projection_roundtrip_random_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = CameraIntrinsics::new(
                rng.gen_range(200.0..1500.0),
                rng.gen_range(200.0..1500.0),
                rng.gen_range(100.0..500.0),
                rng.gen_range(100.0..400.0),
                640,
                480,
            )
            .unwrap();
            let pose = CameraPose::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
            )
            .unwrap();
            let p = ProjectionMatrix::new(&k, &pose);
            for _ in 0..50 {
                let (u, v, z) = (rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0), rng.gen_range(0.1..50.0));
                let x = unproject_pixel(u, v, z, &p).unwrap();
                let back = project_point(&x, &p).unwrap();
                assert!((back.u - u).abs() < 1e-6 && (back.v - v).abs() < 1e-6);
                assert!((back.depth - z).abs() < 1e-9 * z);
            }
        }
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let eye = Vector3::new(1.0, 0.5, -2.0);
        let pose = CameraPose::look_at(eye, Vector3::zeros(), Vector3::y()).unwrap();
        let cam = pose.to_camera(&Vector3::zeros());
        assert!(cam.x.abs() < 1e-12 && cam.y.abs() < 1e-12 && cam.z > 0.0);
        // world up maps to image up (negative image y)
        let above = pose.to_camera(&Vector3::new(0.0, 0.1, 0.0));
        assert!(above.y < 0.0);
    }
}
