use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::camera::{Camera, CameraIntrinsics, CameraPose};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RigCamera {
    pub id: String,
    pub camera: Camera,
}

/// Calibrated camera set with the scene centre used for view selection.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    cameras: Vec<RigCamera>,
    scene_center: Vector3<f64>,
}

impl CameraRig {
    pub fn new(cameras: Vec<RigCamera>, scene_center: Vector3<f64>) -> Result<Self> {
        if cameras.len() < 2 {
            return Err(invalid(format!("a rig needs at least 2 cameras, got {}", cameras.len())));
        }
        let mut seen = HashSet::new();
        for c in &cameras {
            if !seen.insert(c.id.as_str()) {
                return Err(invalid(format!("duplicate camera id {:?}", c.id)));
            }
        }
        Ok(Self { cameras, scene_center })
    }

    pub fn cameras(&self) -> &[RigCamera] {
        &self.cameras
    }

    pub fn scene_center(&self) -> &Vector3<f64> {
        &self.scene_center
    }

    pub fn get(&self, id: &str) -> Option<&RigCamera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CalibrationFile = serde_json::from_str(text)?;
        file.into_rig()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CalibrationFile::from_rig(self))?)
    }
}

/// On-disk calibration layout. Field names are part of the file format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub cameras: Vec<CalibrationEntry>,
    pub scene_center: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub model: String,
}

impl CalibrationFile {
    pub fn into_rig(self) -> Result<CameraRig> {
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for e in self.cameras {
            if e.model != "pinhole" {
                return Err(Error::Format(format!("camera {:?}: unsupported model {:?}", e.id, e.model)));
            }
            let k = Matrix3::from_row_slice(&e.k);
            let r = Matrix3::from_row_slice(&e.r);
            let intrinsics = CameraIntrinsics::from_matrix(&k, e.width, e.height)
                .map_err(|err| invalid(format!("camera {:?}: {err}", e.id)))?;
            let pose = CameraPose::new(r, Vector3::from(e.t))
                .map_err(|err| invalid(format!("camera {:?}: {err}", e.id)))?;
            cameras.push(RigCamera { id: e.id, camera: Camera::new(intrinsics, pose) });
        }
        CameraRig::new(cameras, Vector3::from(self.scene_center))
    }

    pub fn from_rig(rig: &CameraRig) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[r * 3 + c] = m[(r, c)];
                }
            }
            out
        };
        Self {
            cameras: rig
                .cameras
                .iter()
                .map(|c| CalibrationEntry {
                    id: c.id.clone(),
                    width: c.camera.intrinsics.width,
                    height: c.camera.intrinsics.height,
                    k: row_major(&c.camera.intrinsics.matrix()),
                    r: row_major(c.camera.pose.rotation()),
                    t: (*c.camera.pose.translation()).into(),
                    model: "pinhole".into(),
                })
                .collect(),
            scene_center: rig.scene_center.into(),
        }
    }
}

/// Up axis and ordering convention for source-pair selection.
#[derive(Clone, Copy, Debug)]
pub struct SelectionConfig {
    pub up: Vector3<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { up: Vector3::y() }
    }
}

/// Picks the two rig cameras whose (normalised) view vectors `C_n - O` best align with
/// the target's. The result is ordered `(left, right)`: seen from the scene centre with the
/// configured up axis, the right camera lies in the direction `up x V_left`.
pub fn select_source_pair(
    rig: &CameraRig,
    target_center: &Vector3<f64>,
    config: &SelectionConfig,
) -> Result<(String, String)> {
    let v_tar = target_center - rig.scene_center;
    if !(v_tar.norm() > 1e-12) {
        return Err(invalid("target camera coincides with the scene centre"));
    }
    let v_tar = v_tar.normalize();
    let mut scored: Vec<(f64, usize)> = rig
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let v = c.camera.pose.center() - rig.scene_center;
            let n = v.norm();
            let score = if n > 1e-12 { v.dot(&v_tar) / n } else { f64::NEG_INFINITY };
            (score, i)
        })
        .collect();
    // stable: equal scores keep rig order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (a, b) = (scored[0].1, scored[1].1);
    let va = rig.cameras[a].camera.pose.center() - rig.scene_center;
    let vb = rig.cameras[b].camera.pose.center() - rig.scene_center;
    let (left, right) = if config.up.dot(&va.cross(&vb)) >= 0.0 { (a, b) } else { (b, a) };
    Ok((rig.cameras[left].id.clone(), rig.cameras[right].id.clone()))
}
