//! Planar stereo rectification of a calibrated camera pair.
//!
//! Both views are rotated about their centres onto a common image plane whose x-axis is
//! the baseline direction, then resampled bilinearly. The two rectified cameras share
//! intrinsics (focal length = mean of the originals, one principal point), so a world point
//! lands on the same row in both views and `disparity = u_left - u_right = f * b / z`.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::camera::{Camera, CameraIntrinsics, CameraPose, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::grid::{ColorImage, Grid, Mask};

/// An image with its calibration.
#[derive(Clone, Debug)]
pub struct CalibratedView<'a> {
    pub image: &'a ColorImage,
    pub camera: &'a Camera,
}

#[derive(Clone, Debug)]
pub struct RectifiedPair {
    pub left_image: ColorImage,
    pub right_image: ColorImage,
    pub left_valid: Mask,
    pub right_valid: Mask,
    /// Shared rectified intrinsics.
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
    /// Maps homogeneous original-image pixels to rectified pixels.
    pub left_homography: Matrix3<f64>,
    pub right_homography: Matrix3<f64>,
    pub left_pose: CameraPose,
    pub right_pose: CameraPose,
}

impl RectifiedPair {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn left_camera(&self) -> Camera {
        Camera::new(self.intrinsics, self.left_pose)
    }

    pub fn right_camera(&self) -> Camera {
        Camera::new(self.intrinsics, self.right_pose)
    }

    pub fn left_projection(&self) -> ProjectionMatrix {
        ProjectionMatrix::new(&self.intrinsics, &self.left_pose)
    }

    pub fn right_projection(&self) -> ProjectionMatrix {
        ProjectionMatrix::new(&self.intrinsics, &self.right_pose)
    }

    /// Resample an auxiliary per-view mask (e.g. a foreground matte) into the rectified frame.
    pub fn rectify_mask(&self, mask: &Mask, homography: &Matrix3<f64>) -> Mask {
        let inv = homography.try_inverse().expect("rectifying homography is invertible");
        Grid::from_fn(self.width(), self.height(), |x, y| {
            let p = inv * Vector3::new(x as f64, y as f64, 1.0);
            let (u, v) = (p.x / p.z, p.y / p.z);
            let (iu, iv) = (u.round(), v.round());
            iu >= 0.0
                && iv >= 0.0
                && (iu as usize) < mask.width()
                && (iv as usize) < mask.height()
                && *mask.get(iu as usize, iv as usize)
        })
    }
}

pub fn rectify_pair(left: CalibratedView<'_>, right: CalibratedView<'_>) -> Result<RectifiedPair> {
    let cl = *left.camera.pose.center();
    let cr = *right.camera.pose.center();
    let base = cr - cl;
    let baseline = base.norm();
    if !(baseline > 1e-9) {
        return Err(Error::DegenerateGeometry(format!("baseline {baseline:e} m is too small to rectify")));
    }
    for (name, view) in [("left", &left), ("right", &right)] {
        let k = &view.camera.intrinsics;
        if view.image.width() != k.width || view.image.height() != k.height {
            return Err(Error::InvalidInput(format!(
                "{name} image is {}x{}, calibration says {}x{}",
                view.image.width(),
                view.image.height(),
                k.width,
                k.height
            )));
        }
    }

    let x_axis = base / baseline;
    let z_mean = left.camera.pose.forward() + right.camera.pose.forward();
    let y_axis = z_mean.cross(&x_axis);
    if !(y_axis.norm() > 1e-6) {
        return Err(Error::DegenerateGeometry("optical axes are parallel to the baseline".into()));
    }
    let y_axis = y_axis.normalize();
    let z_axis = x_axis.cross(&y_axis);
    let rect_rot = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);

    // the right camera must lie on the +x side of the left one
    let lx = left.camera.pose.rotation().row(0).transpose();
    if lx.dot(&x_axis) <= 0.0 {
        return Err(Error::InvalidInput("right camera is not to the right of the left camera".into()));
    }

    let kl = &left.camera.intrinsics;
    let kr = &right.camera.intrinsics;
    let width = kl.width;
    let height = kl.height;
    let fx = 0.5 * (kl.fx + kr.fx);
    let fy = 0.5 * (kl.fy + kr.fy);

    // principal point: centre the mean of the two mapped image centres
    let mapped_center = |view: &CalibratedView<'_>| {
        let k = &view.camera.intrinsics;
        let c = Vector3::new((k.width as f64 - 1.0) * 0.5, (k.height as f64 - 1.0) * 0.5, 1.0);
        let ray = rect_rot * view.camera.pose.rotation().transpose() * k.matrix().try_inverse().unwrap() * c;
        (fx * ray.x / ray.z, fy * ray.y / ray.z)
    };
    let (lu, lv) = mapped_center(&left);
    let (ru, rv) = mapped_center(&right);
    let cx = ((width as f64 - 1.0) * 0.5 - 0.5 * (lu + ru)).clamp(0.0, width as f64 - 1.0);
    let cy = ((height as f64 - 1.0) * 0.5 - 0.5 * (lv + rv)).clamp(0.0, height as f64 - 1.0);
    let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, width, height)?;
    let k_new = intrinsics.matrix();

    let homography = |cam: &Camera| {
        k_new * rect_rot * cam.pose.rotation().transpose() * cam.intrinsics.matrix().try_inverse().unwrap()
    };
    let hl = homography(left.camera);
    let hr = homography(right.camera);
    let (left_image, left_valid) = warp(left.image, &hl, width, height);
    let (right_image, right_valid) = warp(right.image, &hr, width, height);

    Ok(RectifiedPair {
        left_image,
        right_image,
        left_valid,
        right_valid,
        intrinsics,
        baseline,
        left_homography: hl,
        right_homography: hr,
        left_pose: CameraPose::from_center(rect_rot, cl)?,
        right_pose: CameraPose::from_center(rect_rot, cr)?,
    })
}

fn warp(src: &ColorImage, h: &Matrix3<f64>, width: usize, height: usize) -> (ColorImage, Mask) {
    let inv = h.try_inverse().expect("rectifying homography is invertible");
    let samples: Vec<([f64; 3], bool)> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let p = inv * Vector3::new((i % width) as f64, (i / width) as f64, 1.0);
            if p.z <= 0.0 {
                return ([0.0; 3], false);
            }
            let (u, v) = (p.x / p.z, p.y / p.z);
            match src.sample_bilinear(u, v) {
                Some(c) => (c, true),
                // replicate the border so invalid pixels do not form hard black edges
                None => {
                    let (uc, vc) = (u.clamp(0.0, (src.width() - 1) as f64), v.clamp(0.0, (src.height() - 1) as f64));
                    (src.sample_bilinear(uc, vc).unwrap_or([0.0; 3]), false)
                }
            }
        })
        .collect();
    let image = Grid::from_vec(width, height, samples.iter().map(|s| s.0).collect()).expect("sized");
    let valid = Grid::from_vec(width, height, samples.iter().map(|s| s.1).collect()).expect("sized");
    (image, valid)
}
