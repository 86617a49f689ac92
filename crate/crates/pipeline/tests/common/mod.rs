#![allow(dead_code)]

use splatstereo::geometry::{Camera, CameraPose};
use splatstereo::render::RenderConfig;
use splatstereo::synthetic::ArcSceneSpec;
use splatstereo_pipeline::toy::{toy_scene, ToyScene};

pub fn small_toy(frames: usize) -> ToyScene {
    let spec = ArcSceneSpec { width: 96, height: 72, spacing_px: 1.5, texture_sigma: 4.0, ..Default::default() };
    toy_scene(&spec, frames, &RenderConfig::default()).unwrap()
}

/// `camera` moved sideways by `dx` along its own x axis.
pub fn nudged(camera: &Camera, dx: f64) -> Camera {
    let t = camera.pose.translation() - nalgebra::Vector3::new(dx, 0.0, 0.0);
    Camera::new(camera.intrinsics, CameraPose::new(*camera.pose.rotation(), t).unwrap())
}
