//! Per-pixel Gaussian parameter maps on the rectified source views and their
//! lifting into a world-space cloud.

mod gamma;
mod heads;
mod ply;

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gamma::{layout, regress_parameter_features, FeatureBackend, GaussianFeatureMap, UNetDecoder};
pub use heads::{
    activate, activate_heads, logit, softplus, softplus_inverse, ActivationConfig, HeuristicHeads, LinearHeads,
    ParameterHeads, RawHeads,
};
pub use ply::{read_ply, read_ply_file, write_ply, write_ply_file, PlyFormat};

use crate::error::{invalid, Result};
use crate::geometry::{unproject_pixel, DepthMap, ProjectionMatrix};
use crate::grid::{ColorImage, Grid, Mask};
use crate::nn::Weights;
use crate::render::{quat_norm, Gaussian3D, GaussianCloud, Quat, SourceTag, SourceView, IDENTITY_QUAT};
use crate::stereo::FeaturePyramid;

/// Image-plane Gaussian attributes. Rotations are in the source camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParameterMaps {
    pub color: ColorImage,
    pub rotation: Grid<Quat>,
    pub scale: Grid<[f64; 3]>,
    pub opacity: Grid<f64>,
    pub residual: Grid<f64>,
    pub valid: Mask,
    /// Pixels whose raw quaternion was zero and got the identity instead.
    pub flagged: Mask,
}

impl GaussianParameterMaps {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Grid::filled(width, height, [0.0; 3]),
            rotation: Grid::filled(width, height, IDENTITY_QUAT),
            scale: Grid::filled(width, height, [1e-3; 3]),
            opacity: Grid::filled(width, height, 0.0),
            residual: Grid::filled(width, height, 0.0),
            valid: Grid::filled(width, height, false),
            flagged: Grid::filled(width, height, false),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    /// Describes the first valid pixel that breaks a range invariant.
    pub fn check(&self, cfg: &ActivationConfig) -> Result<()> {
        for (i, &ok) in self.valid.data().iter().enumerate() {
            if !ok {
                continue;
            }
            let (x, y) = (i % self.width(), i / self.width());
            let q = self.rotation.data()[i];
            let s = self.scale.data()[i];
            let a = self.opacity.data()[i];
            let d = self.residual.data()[i];
            let c = self.color.data()[i];
            if (quat_norm(&q) - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("non-unit rotation at ({x}, {y})")));
            }
            if s.iter().any(|&v| !(v >= cfg.scale_min && v <= cfg.scale_max)) {
                return Err(invalid(format!("scale out of range at ({x}, {y})")));
            }
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid(format!("opacity out of range at ({x}, {y})")));
            }
            if !(d.abs() < cfg.gamma) {
                return Err(invalid(format!("depth residual out of range at ({x}, {y})")));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite colour at ({x}, {y})")));
            }
        }
        Ok(())
    }
}

/// The source image is the colour map.
pub fn color_map(image: &ColorImage) -> ColorImage {
    image.clone()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiftedCloud {
    pub cloud: GaussianCloud,
    /// Valid pixels dropped because `D + M_d <= 0`.
    pub skipped: usize,
}

fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    [q.w, q.i, q.j, q.k]
}

pub(crate) fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Camera-to-world rotation of `projection` as a quaternion.
pub fn camera_to_world_quat(projection: &ProjectionMatrix) -> Quat {
    matrix_to_quat(&projection.rotation().transpose())
}

/// One Gaussian per pixel valid in both `maps` and `depth`, at the
/// unprojection of the pixel centre with depth `D + M_d`. Row-major order.
pub fn lift_to_gaussians(
    maps: &GaussianParameterMaps,
    depth: &DepthMap,
    projection: &ProjectionMatrix,
    view: SourceView,
) -> Result<LiftedCloud> {
    let (w, h) = (maps.width(), maps.height());
    if depth.width() != w || depth.height() != h {
        return Err(invalid("parameter maps and depth differ in size"));
    }
    let to_world = camera_to_world_quat(projection);
    let lifted: Vec<Option<std::result::Result<(Gaussian3D, SourceTag), ()>>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let z = match depth.get(x, y) {
                Some(z) if *maps.valid.get(x, y) => z + maps.residual.get(x, y),
                _ => return None,
            };
            if !(z > 0.0) {
                return Some(Err(()));
            }
            let mean = unproject_pixel(x as f64, y as f64, z, projection).ok()?;
            let c = maps.color.get(x, y);
            let s = maps.scale.get(x, y);
            let g = Gaussian3D {
                mean,
                rotation: quat_mul(&to_world, maps.rotation.get(x, y)),
                scale: nalgebra::Vector3::new(s[0], s[1], s[2]),
                color: nalgebra::Vector3::new(c[0], c[1], c[2]),
                opacity: *maps.opacity.get(x, y),
            };
            Some(Ok((g, SourceTag { view, x: x as u32, y: y as u32 })))
        })
        .collect();
    let mut cloud = GaussianCloud::new();
    let mut skipped = 0;
    for item in lifted.into_iter().flatten() {
        match item {
            Ok((g, tag)) => cloud.push(g, Some(tag)),
            Err(()) => skipped += 1,
        }
    }
    Ok(LiftedCloud { cloud, skipped })
}

/// Union of both clouds, left first, tags preserved.
pub fn merge_views(left: &GaussianCloud, right: &GaussianCloud) -> GaussianCloud {
    let mut out = left.clone();
    out.extend_from(right);
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    pub activation: ActivationConfig,
    pub heuristics: HeuristicHeads,
    /// Weights manifest with `mapper.*` and/or `heads.*` tensors.
    pub weights: Option<PathBuf>,
}

impl MapperConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let (Some(w), Some(dir)) = (&cfg.weights, path.parent()) {
            if w.is_relative() {
                cfg.weights = Some(dir.join(w));
            }
        }
        Ok(cfg)
    }
}

/// Feature regression plus heads, shared by both source views.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMapper {
    pub config: MapperConfig,
    pub features: FeatureBackend,
    pub heads: ParameterHeads,
}

impl Default for GaussianMapper {
    fn default() -> Self {
        let config = MapperConfig::default();
        Self { heads: ParameterHeads::Heuristic(config.heuristics), config, features: FeatureBackend::Handcrafted }
    }
}

impl GaussianMapper {
    /// `image_channels` are the stereo feature widths per level.
    pub fn from_config(config: MapperConfig, image_channels: &[usize]) -> Result<Self> {
        let weights = config.weights.as_deref().map(Weights::load).transpose()?;
        let features = match weights.as_ref().filter(|w| w.contains_prefix("mapper.")) {
            Some(w) => FeatureBackend::Weights(UNetDecoder::from_weights(w, image_channels)?),
            None => FeatureBackend::Handcrafted,
        };
        let heads = match weights.as_ref().filter(|w| w.contains_prefix("heads.")) {
            Some(w) => {
                let width = match &features {
                    FeatureBackend::Weights(net) => net.decoder.last().expect("decoder has layers").output,
                    FeatureBackend::Handcrafted => {
                        layout::IMAGE_FEATURES + layout::TAIL + image_channels.iter().take(2).sum::<usize>()
                    }
                };
                ParameterHeads::Linear(LinearHeads::from_weights(w, width)?)
            }
            None => ParameterHeads::Heuristic(config.heuristics),
        };
        Ok(Self { config, features, heads })
    }

    pub fn build_maps(
        &self,
        image: &ColorImage,
        features: &FeaturePyramid,
        depth: &DepthMap,
        fx: f64,
    ) -> Result<GaussianParameterMaps> {
        let gamma = regress_parameter_features(image, features, depth, &self.features)?;
        activate_heads(&gamma, &self.heads, depth, &color_map(image), fx, &self.config.activation)
    }
}
