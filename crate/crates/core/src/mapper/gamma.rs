use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::geometry::DepthMap;
use crate::grid::{ColorImage, FeatureMap};
use crate::nn::{Activation, Conv2d, Weights};
use crate::stereo::FeaturePyramid;

/// Channel offsets of the handcrafted feature map.
pub mod layout {
    /// RGB.
    pub const COLOR: usize = 0;
    /// Three scales (window radius 1, 2, 4) of
    /// `[mean depth, d(ln z)/dx, d(ln z)/dy, local variance of ln z]`.
    pub const DEPTH: usize = 3;
    pub const DEPTH_PER_LEVEL: usize = 4;
    pub const DEPTH_LEVELS: usize = 3;
    /// Local luminance standard deviation at the same three radii.
    pub const TEXTURE: usize = 15;
    pub const CONFIDENCE: usize = 18;
    pub const VALID: usize = 19;
    /// Stereo features of levels 1 and 2, nearest-upsampled.
    pub const IMAGE_FEATURES: usize = 20;
    /// Offset of the trailing block, relative to the end of the image features:
    /// luminance x/y gradient, Laplacian, constant one.
    pub const TAIL: usize = 4;
}

/// Per-pixel feature tensor the parameter heads read.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFeatureMap {
    pub features: FeatureMap,
}

impl GaussianFeatureMap {
    pub fn channels(&self) -> usize {
        self.features.channels()
    }
}

/// Depth encoder plus decoder read from a weights file.
///
/// `mapper.depth.{s}` (1 -> E_s, 3x3) encodes depth block-averaged to level
/// `s`. `mapper.decoder.3` takes level-3 image and depth features,
/// `mapper.decoder.{2,1}` additionally the upsampled previous output, and
/// `mapper.decoder.0` takes RGB, depth and the upsampled level-1 output and
/// produces the final width.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetDecoder {
    pub depth: Vec<Conv2d>,
    pub decoder: Vec<Conv2d>,
}

impl UNetDecoder {
    pub fn from_weights(w: &Weights, image_channels: &[usize]) -> Result<Self> {
        if image_channels.len() != 3 {
            return Err(invalid("the decoder expects three image feature levels"));
        }
        let depth: Vec<Conv2d> =
            (1..=3).map(|s| w.conv_any_output(&format!("mapper.depth.{s}"), 1, 3)).collect::<Result<_>>()?;
        let mut decoder = Vec::new();
        let mut prev = 0;
        for s in (1..=3).rev() {
            let c = w.conv_any_output(&format!("mapper.decoder.{s}"), image_channels[s - 1] + depth[s - 1].output + prev, 3)?;
            prev = c.output;
            decoder.push(c);
        }
        decoder.push(w.conv_any_output("mapper.decoder.0", 4 + prev, 3)?);
        Ok(Self { depth, decoder })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum FeatureBackend {
    #[default]
    Handcrafted,
    Weights(UNetDecoder),
}

/// Summed-area table with window queries clamped to the grid.
struct Integral {
    w: usize,
    h: usize,
    sum: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let mut sum = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(x, y);
                sum[(y + 1) * (w + 1) + x + 1] = sum[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, h, sum }
    }

    fn window(&self, x: usize, y: usize, r: usize) -> f64 {
        let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
        let (x1, y1) = ((x + r + 1).min(self.w), (y + r + 1).min(self.h));
        let s = |xx: usize, yy: usize| self.sum[yy * (self.w + 1) + xx];
        s(x1, y1) - s(x0, y1) - s(x1, y0) + s(x0, y0)
    }
}

fn depth_at(depth: &DepthMap, x: usize, y: usize) -> Option<f64> {
    depth.get(x, y).filter(|&z| z > 0.0)
}

/// Centred difference of `ln z` over `+-r` columns (or rows), zero when either
/// end is missing.
fn log_gradient(depth: &DepthMap, x: usize, y: usize, r: usize, horizontal: bool) -> f64 {
    let (lo, hi) = if horizontal {
        (x.saturating_sub(r), (x + r).min(depth.width() - 1))
    } else {
        (y.saturating_sub(r), (y + r).min(depth.height() - 1))
    };
    if hi == lo {
        return 0.0;
    }
    let at = |i: usize| if horizontal { depth_at(depth, i, y) } else { depth_at(depth, x, i) };
    match (at(lo), at(hi)) {
        (Some(a), Some(b)) => (b.ln() - a.ln()) / (hi - lo) as f64,
        _ => 0.0,
    }
}

fn handcrafted(image: &ColorImage, features: &FeaturePyramid, depth: &DepthMap) -> Result<FeatureMap> {
    let (w, h) = (image.width(), image.height());
    let f1 = features.level(1);
    let f2 = features.level(2);
    let d_img = f1.channels() + f2.channels();
    let channels = layout::IMAGE_FEATURES + d_img + layout::TAIL;
    let lum = image.luminance();
    let valid_w = Integral::new(w, h, |x, y| if depth_at(depth, x, y).is_some() { 1.0 } else { 0.0 });
    let z_sum = Integral::new(w, h, |x, y| depth_at(depth, x, y).unwrap_or(0.0));
    let lz_sum = Integral::new(w, h, |x, y| depth_at(depth, x, y).map_or(0.0, f64::ln));
    let lz2_sum = Integral::new(w, h, |x, y| depth_at(depth, x, y).map_or(0.0, |z| z.ln().powi(2)));
    let l_sum = Integral::new(w, h, |x, y| *lum.get(x, y));
    let l2_sum = Integral::new(w, h, |x, y| lum.get(x, y).powi(2));
    let ones = Integral::new(w, h, |_, _| 1.0);
    let conf = depth.confidence.as_ref();

    let mut out = FeatureMap::zeros(w, h, channels);
    out.data_mut().par_chunks_mut(w * channels).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let px = &mut row[x * channels..(x + 1) * channels];
            px[layout::COLOR..layout::COLOR + 3].copy_from_slice(image.get(x, y));
            for l in 0..layout::DEPTH_LEVELS {
                let r = 1 << l;
                let base = layout::DEPTH + l * layout::DEPTH_PER_LEVEL;
                let n = valid_w.window(x, y, r);
                if n > 0.0 {
                    px[base] = z_sum.window(x, y, r) / n;
                    let m = lz_sum.window(x, y, r) / n;
                    px[base + 3] = (lz2_sum.window(x, y, r) / n - m * m).max(0.0);
                }
                px[base + 1] = log_gradient(depth, x, y, r, true);
                px[base + 2] = log_gradient(depth, x, y, r, false);
                let k = ones.window(x, y, r);
                let m = l_sum.window(x, y, r) / k;
                px[layout::TEXTURE + l] = (l2_sum.window(x, y, r) / k - m * m).max(0.0).sqrt();
            }
            let valid = depth_at(depth, x, y).is_some();
            px[layout::CONFIDENCE] = if valid { conf.map_or(1.0, |c| *c.get(x, y)) } else { 0.0 };
            px[layout::VALID] = if valid { 1.0 } else { 0.0 };
            let mut o = layout::IMAGE_FEATURES;
            for (s, f) in [(1, f1), (2, f2)] {
                let fx = (x >> s).min(f.width() - 1);
                let fy = (y >> s).min(f.height() - 1);
                px[o..o + f.channels()].copy_from_slice(f.pixel(fx, fy));
                o += f.channels();
            }
            let at = |dx: isize, dy: isize| {
                *lum.get((x as isize + dx).clamp(0, w as isize - 1) as usize, (y as isize + dy).clamp(0, h as isize - 1) as usize)
            };
            px[o] = 0.5 * (at(1, 0) - at(-1, 0));
            px[o + 1] = 0.5 * (at(0, 1) - at(0, -1));
            px[o + 2] = at(1, 0) + at(-1, 0) + at(0, 1) + at(0, -1) - 4.0 * at(0, 0);
            px[o + 3] = 1.0;
        }
    });
    Ok(out)
}

/// Nearest-neighbour resize to an arbitrary size.
fn resize_nearest(src: &FeatureMap, w: usize, h: usize) -> FeatureMap {
    let c = src.channels();
    let mut out = FeatureMap::zeros(w, h, c);
    for y in 0..h {
        let sy = (y * src.height() / h).min(src.height() - 1);
        for x in 0..w {
            let sx = (x * src.width() / w).min(src.width() - 1);
            out.pixel_mut(x, y).copy_from_slice(src.pixel(sx, sy));
        }
    }
    out
}

fn depth_level(depth: &DepthMap, s: usize) -> FeatureMap {
    let f = 1 << s;
    let (cw, ch) = (depth.width() / f, depth.height() / f);
    let mut out = FeatureMap::zeros(cw, ch, 1);
    for by in 0..ch {
        for bx in 0..cw {
            let (mut acc, mut n) = (0.0, 0.0);
            for y in by * f..(by + 1) * f {
                for x in bx * f..(bx + 1) * f {
                    if let Some(z) = depth_at(depth, x, y) {
                        acc += z;
                        n += 1.0;
                    }
                }
            }
            out.pixel_mut(bx, by)[0] = if n > 0.0 { acc / n } else { 0.0 };
        }
    }
    out
}

fn decode(net: &UNetDecoder, image: &ColorImage, features: &FeaturePyramid, depth: &DepthMap) -> Result<FeatureMap> {
    let mut prev: Option<FeatureMap> = None;
    for (i, s) in (1..=3).rev().enumerate() {
        let f = features.level(s);
        let enc = net.depth[s - 1].forward(&depth_level(depth, s), Activation::Relu)?;
        let enc = resize_nearest(&enc, f.width(), f.height());
        let x = match &prev {
            Some(p) => FeatureMap::concat(&[f, &enc, &resize_nearest(p, f.width(), f.height())])?,
            None => FeatureMap::concat(&[f, &enc])?,
        };
        prev = Some(net.decoder[i].forward(&x, Activation::Relu)?);
    }
    let (w, h) = (image.width(), image.height());
    let rgb = FeatureMap::from_vec(w, h, 3, image.data().iter().flat_map(|p| p.iter().copied()).collect())?;
    let z = FeatureMap::from_vec(w, h, 1, (0..w * h).map(|i| depth_at(depth, i % w, i / w).unwrap_or(0.0)).collect())?;
    let up = resize_nearest(prev.as_ref().expect("three levels decoded"), w, h);
    net.decoder[3].forward(&FeatureMap::concat(&[&rgb, &z, &up])?, Activation::None)
}

/// Fuse image features and an encoding of the depth map into a full-resolution
/// per-pixel feature map.
pub fn regress_parameter_features(
    image: &ColorImage,
    features: &FeaturePyramid,
    depth: &DepthMap,
    backend: &FeatureBackend,
) -> Result<GaussianFeatureMap> {
    if !image.same_shape(&depth.values) {
        return Err(invalid("image and depth map differ in size"));
    }
    if features.levels.len() < 3 {
        return Err(invalid("feature pyramid needs three levels"));
    }
    for s in 1..=3 {
        let f = features.level(s);
        if f.width() != image.width() >> s || f.height() != image.height() >> s {
            return Err(invalid(format!("feature level {s} is not aligned with the image")));
        }
    }
    let features = match backend {
        FeatureBackend::Handcrafted => handcrafted(image, features, depth)?,
        FeatureBackend::Weights(net) => decode(net, image, features, depth)?,
    };
    Ok(GaussianFeatureMap { features })
}
