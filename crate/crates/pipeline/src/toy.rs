//! A small synthetic dataset with exact ground truth: the arc scene seen by
//! four rig cameras, with the middle of the arc held out.

use std::collections::BTreeMap;

use splatstereo::geometry::{Camera, CameraRig, RigCamera};
use splatstereo::render::{render, RenderConfig};
use splatstereo::synthetic::{arc_scene, ArcScene, ArcSceneSpec};

use crate::dataset::SceneDataset;
use crate::error::Result;

/// Rig camera ids and their angles in units of the spec's half angle.
pub const TOY_CAMERAS: [(&str, f64); 4] = [("outer_left", -3.0), ("left", -1.0), ("right", 1.0), ("outer_right", 3.0)];

pub struct ToyScene {
    pub dataset: SceneDataset,
    /// One scene per frame; frame `i` uses seed `spec.seed + i`.
    pub scenes: Vec<ArcScene>,
    /// The middle of the arc, not part of the rig.
    pub held_out: Camera,
}

pub fn toy_scene(spec: &ArcSceneSpec, frames: usize, config: &RenderConfig) -> Result<ToyScene> {
    let a = spec.half_angle();
    let cameras: Vec<RigCamera> = TOY_CAMERAS
        .iter()
        .map(|(id, k)| Ok(RigCamera { id: (*id).into(), camera: spec.camera_at(k * a)? }))
        .collect::<Result<_>>()?;
    let rig = CameraRig::new(cameras, nalgebra::Vector3::zeros())?;
    let mut scenes = Vec::with_capacity(frames);
    let mut images = Vec::with_capacity(frames);
    for i in 0..frames {
        let scene = arc_scene(&ArcSceneSpec { seed: spec.seed + i as u64, ..*spec }, config)?;
        let mut frame = BTreeMap::new();
        for c in rig.cameras() {
            frame.insert(c.id.clone(), render(&scene.cloud.gaussians, &c.camera, config)?.color);
        }
        images.push(frame);
        scenes.push(scene);
    }
    let held_out = spec.camera_at(0.0)?;
    Ok(ToyScene { dataset: SceneDataset::from_images(rig, images)?, scenes, held_out })
}

impl ToyScene {
    pub fn held_out_image(&self, frame: usize) -> &splatstereo::grid::ColorImage {
        &self.scenes[frame].images[1]
    }
}
