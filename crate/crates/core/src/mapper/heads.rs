use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gamma::{layout, GaussianFeatureMap};
use super::GaussianParameterMaps;
use crate::error::{invalid, Result};
use crate::geometry::DepthMap;
use crate::grid::{ColorImage, Grid};
use crate::nn::{Conv2d, Weights};
use crate::render::{normalize_quat, Quat, IDENTITY_QUAT};

/// Activation constants shared by every backend.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivationConfig {
    /// Bound of the depth residual, `M_d = gamma tanh(h_d)`.
    pub gamma: f64,
    pub scale_gain: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self { gamma: 0.5, scale_gain: 1.0, scale_min: 1e-5, scale_max: 0.5 }
    }
}

/// Deterministic stand-ins for trained heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicHeads {
    /// Gaussian standard deviation in units of the pixel footprint `z / fx`.
    pub footprint_scale: f64,
    /// Local luminance standard deviation above which texture counts as fine.
    pub texture_threshold: f64,
    /// Scale multiplier on fine texture.
    pub fine_texture_factor: f64,
}

impl Default for HeuristicHeads {
    fn default() -> Self {
        Self { footprint_scale: 0.5, texture_threshold: 0.08, fine_texture_factor: 0.5 }
    }
}

/// 1x1 convolutions `heads.{rotation,scale,opacity,residual}` on the feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHeads {
    pub rotation: Conv2d,
    pub scale: Conv2d,
    pub opacity: Conv2d,
    pub residual: Conv2d,
}

impl LinearHeads {
    pub fn from_weights(w: &Weights, channels: usize) -> Result<Self> {
        Ok(Self {
            rotation: w.conv("heads.rotation", channels, 4, 1)?,
            scale: w.conv("heads.scale", channels, 3, 1)?,
            opacity: w.conv("heads.opacity", channels, 1, 1)?,
            residual: w.conv("heads.residual", channels, 1, 1)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParameterHeads {
    Heuristic(HeuristicHeads),
    Linear(LinearHeads),
}

impl Default for ParameterHeads {
    fn default() -> Self {
        ParameterHeads::Heuristic(HeuristicHeads::default())
    }
}

/// Pre-activation head outputs for one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawHeads {
    pub rotation: Quat,
    pub scale: [f64; 3],
    pub opacity: f64,
    pub residual: f64,
}

#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive inputs.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

const RESIDUAL_LIMIT: f64 = 1.0 - 1e-12;

/// Activated attributes for one pixel, plus whether the quaternion had to be replaced.
pub fn activate(raw: &RawHeads, cfg: &ActivationConfig) -> (Quat, [f64; 3], f64, f64, bool) {
    let (rotation, flagged) = match normalize_quat(&raw.rotation) {
        Some(q) => (q, false),
        None => (IDENTITY_QUAT, true),
    };
    let scale = raw.scale.map(|s| (cfg.scale_gain * softplus(s)).clamp(cfg.scale_min, cfg.scale_max));
    let opacity = crate::nn::sigmoid(raw.opacity);
    // tanh saturates to exactly 1 in floating point; keep the bound strict
    let residual = cfg.gamma * raw.residual.tanh().clamp(-RESIDUAL_LIMIT, RESIDUAL_LIMIT);
    (rotation, scale, opacity, residual, flagged)
}

fn heuristic_raw(h: &HeuristicHeads, px: &[f64], z: f64, fx: f64, cfg: &ActivationConfig) -> RawHeads {
    let mut s = h.footprint_scale * z / fx;
    if px[layout::TEXTURE] > h.texture_threshold {
        s *= h.fine_texture_factor;
    }
    let s = s.clamp(cfg.scale_min, cfg.scale_max) / cfg.scale_gain;
    let conf = px[layout::CONFIDENCE].clamp(1e-6, 1.0 - 1e-6);
    RawHeads { rotation: IDENTITY_QUAT, scale: [softplus_inverse(s); 3], opacity: logit(conf), residual: 0.0 }
}

/// Apply the heads to every pixel. `fx` is the rectified focal length in
/// pixels. Pixels invalid in `depth` are invalid in the result.
pub fn activate_heads(
    gamma: &GaussianFeatureMap,
    heads: &ParameterHeads,
    depth: &DepthMap,
    color: &ColorImage,
    fx: f64,
    cfg: &ActivationConfig,
) -> Result<GaussianParameterMaps> {
    let f = &gamma.features;
    let (w, h) = (f.width(), f.height());
    if depth.width() != w || depth.height() != h || color.width() != w || color.height() != h {
        return Err(invalid("feature map, depth and colour differ in size"));
    }
    if !(fx > 0.0) {
        return Err(invalid("focal length must be positive"));
    }
    let raw: Vec<RawHeads> = match heads {
        ParameterHeads::Heuristic(hh) => {
            if f.channels() < layout::IMAGE_FEATURES + layout::TAIL {
                return Err(invalid("heuristic heads need the handcrafted feature layout"));
            }
            (0..w * h)
                .into_par_iter()
                .map(|i| {
                    let (x, y) = (i % w, i / w);
                    let z = depth.get(x, y).filter(|&z| z > 0.0).unwrap_or(1.0);
                    heuristic_raw(hh, f.pixel(x, y), z, fx, cfg)
                })
                .collect()
        }
        ParameterHeads::Linear(lh) => {
            for (name, c) in [("rotation", &lh.rotation), ("scale", &lh.scale), ("opacity", &lh.opacity), ("residual", &lh.residual)] {
                if c.input != f.channels() {
                    return Err(invalid(format!("{name} head expects {} channels, got {}", c.input, f.channels())));
                }
            }
            (0..w * h)
                .into_par_iter()
                .map(|i| {
                    let px = f.pixel(i % w, i / w);
                    let (mut r, mut s, mut o, mut d) = ([0.0; 4], [0.0; 3], [0.0; 1], [0.0; 1]);
                    lh.rotation.apply_vec(px, &mut r);
                    lh.scale.apply_vec(px, &mut s);
                    lh.opacity.apply_vec(px, &mut o);
                    lh.residual.apply_vec(px, &mut d);
                    RawHeads { rotation: r, scale: s, opacity: o[0], residual: d[0] }
                })
                .collect()
        }
    };
    let activated: Vec<_> = raw.par_iter().map(|r| activate(r, cfg)).collect();
    let valid = Grid::from_fn(w, h, |x, y| depth.get(x, y).is_some_and(|z| z > 0.0));
    let mut maps = GaussianParameterMaps::empty(w, h);
    maps.color = color.clone();
    for (i, (q, s, o, d, flag)) in activated.into_iter().enumerate() {
        maps.rotation.data_mut()[i] = q;
        maps.scale.data_mut()[i] = s;
        maps.opacity.data_mut()[i] = o;
        maps.residual.data_mut()[i] = d;
        maps.flagged.data_mut()[i] = flag;
    }
    maps.valid = valid;
    Ok(maps)
}
