use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::{gaussian_blur, ColorImage, FeatureMap, Grid};
use crate::nn::{Activation, Conv2d, Weights};

/// Number of pyramid levels; level `s` has stride `2^s`, `s = 1..=3`.
pub const NUM_LEVELS: usize = 3;

/// Channel widths of the handcrafted levels.
pub const HANDCRAFTED_CHANNELS: [usize; NUM_LEVELS] = [16, 24, 32];

/// Soft census temperature on luminance differences.
const CENSUS_TAU: f64 = 0.02;

const DIRECTIONS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// `levels[s - 1]` holds level `s` at `(W / 2^s) x (H / 2^s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    /// Level `s`, `1 <= s <= NUM_LEVELS`.
    pub fn level(&self, s: usize) -> &FeatureMap {
        &self.levels[s - 1]
    }

    pub fn coarsest(&self) -> &FeatureMap {
        self.levels.last().expect("pyramid has levels")
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureMap::channels).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self { levels: self.levels.iter().map(FeatureMap::flip_horizontal).collect() }
    }
}

/// Per-level convolution stacks read from a weights file.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    pub levels: Vec<(Conv2d, Conv2d)>,
}

impl ConvEncoder {
    /// Tensors `encoder.{s}.conv1` (3 -> D_s, 3x3) and `encoder.{s}.conv2` (D_s -> D_s, 3x3).
    pub fn from_weights(w: &Weights) -> Result<Self> {
        let mut levels = Vec::new();
        for s in 1..=NUM_LEVELS {
            let c1 = w.conv_any_output(&format!("encoder.{s}.conv1"), 3, 3)?;
            let c2 = w.conv(&format!("encoder.{s}.conv2"), c1.output, c1.output, 3)?;
            levels.push((c1, c2));
        }
        Ok(Self { levels })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum FeatureExtractor {
    #[default]
    Handcrafted,
    Weights(ConvEncoder),
}

impl FeatureExtractor {
    pub fn channels(&self) -> Vec<usize> {
        match self {
            FeatureExtractor::Handcrafted => HANDCRAFTED_CHANNELS.to_vec(),
            FeatureExtractor::Weights(e) => e.levels.iter().map(|(_, c)| c.output).collect(),
        }
    }
}

pub fn extract_features(image: &ColorImage, extractor: &FeatureExtractor) -> Result<FeaturePyramid> {
    let stride = 1 << NUM_LEVELS;
    if image.width() < stride || image.height() < stride {
        return Err(invalid(format!(
            "image {}x{} is smaller than the coarsest stride {stride}",
            image.width(),
            image.height()
        )));
    }
    let levels = match extractor {
        FeatureExtractor::Handcrafted => (1..=NUM_LEVELS).map(|s| handcrafted_level(image, s)).collect(),
        FeatureExtractor::Weights(enc) => enc
            .levels
            .iter()
            .enumerate()
            .map(|(i, (c1, c2))| {
                let pooled = block_average_color(image, 1 << (i + 1));
                let h = c1.forward(&pooled, Activation::Relu)?;
                Ok(normalize_pixels(c2.forward(&h, Activation::None)?))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(FeaturePyramid { levels })
}

fn shifted(g: &Grid<f64>, x: usize, y: usize, dx: isize, dy: isize) -> f64 {
    let sx = (x as isize + dx).clamp(0, g.width() as isize - 1) as usize;
    let sy = (y as isize + dy).clamp(0, g.height() as isize - 1) as usize;
    *g.get(sx, sy)
}

/// Full-resolution channel maps for level `s`, then `2^s` block averages,
/// then per-pixel L2 normalisation. Channel order: colour deviation from a wide
/// local mean (3), luminance gradient (2), Laplacian (1), red-blue chroma
/// gradient (2), soft census at radii `1..=s` in 8 directions.
fn handcrafted_level(image: &ColorImage, s: usize) -> FeatureMap {
    let f = 1usize << s;
    let step = f as isize;
    let sigma = 0.5 * f as f64;
    let blurred: Vec<Grid<f64>> = (0..3).into_par_iter().map(|c| gaussian_blur(&image.channel(c), sigma)).collect();
    let wide: Vec<Grid<f64>> = (0..3).into_par_iter().map(|c| gaussian_blur(&image.channel(c), 2.0 * f as f64)).collect();
    let lum = Grid::from_fn(image.width(), image.height(), |x, y| {
        (blurred[0].get(x, y) + blurred[1].get(x, y) + blurred[2].get(x, y)) / 3.0
    });
    let chroma = Grid::from_fn(image.width(), image.height(), |x, y| blurred[0].get(x, y) - blurred[2].get(x, y));

    let mut channels: Vec<Box<dyn Fn(usize, usize) -> f64 + Sync + '_>> = Vec::new();
    for c in 0..3 {
        let (b, w) = (&blurred[c], &wide[c]);
        channels.push(Box::new(move |x, y| b.get(x, y) - w.get(x, y)));
    }
    let l = &lum;
    channels.push(Box::new(move |x, y| 0.5 * (shifted(l, x, y, step, 0) - shifted(l, x, y, -step, 0))));
    channels.push(Box::new(move |x, y| 0.5 * (shifted(l, x, y, 0, step) - shifted(l, x, y, 0, -step))));
    channels.push(Box::new(move |x, y| {
        0.25 * (shifted(l, x, y, step, 0) + shifted(l, x, y, -step, 0) + shifted(l, x, y, 0, step)
            + shifted(l, x, y, 0, -step))
            - l.get(x, y)
    }));
    let ch = &chroma;
    channels.push(Box::new(move |x, y| 0.5 * (shifted(ch, x, y, step, 0) - shifted(ch, x, y, -step, 0))));
    channels.push(Box::new(move |x, y| 0.5 * (shifted(ch, x, y, 0, step) - shifted(ch, x, y, 0, -step))));
    for r in 1..=s as isize {
        for (dx, dy) in DIRECTIONS {
            channels.push(Box::new(move |x, y| {
                ((shifted(l, x, y, dx * step * r, dy * step * r) - l.get(x, y)) / CENSUS_TAU).tanh()
            }));
        }
    }
    debug_assert_eq!(channels.len(), HANDCRAFTED_CHANNELS[s - 1]);

    let (cw, chh) = (image.width() / f, image.height() / f);
    let d = channels.len();
    let pooled: Vec<Vec<f64>> = channels
        .par_iter()
        .map(|func| {
            let mut out = vec![0.0; cw * chh];
            for (i, o) in out.iter_mut().enumerate() {
                let (bx, by) = (i % cw, i / cw);
                let mut acc = 0.0;
                for y in by * f..(by + 1) * f {
                    for x in bx * f..(bx + 1) * f {
                        acc += func(x, y);
                    }
                }
                *o = acc / (f * f) as f64;
            }
            out
        })
        .collect();
    let mut map = FeatureMap::zeros(cw, chh, d);
    for (i, px) in map.data_mut().chunks_mut(d).enumerate() {
        for (c, v) in px.iter_mut().enumerate() {
            *v = pooled[c][i];
        }
    }
    normalize_pixels(map)
}

pub(crate) fn block_average_color(image: &ColorImage, f: usize) -> FeatureMap {
    let (cw, ch) = (image.width() / f, image.height() / f);
    let mut out = FeatureMap::zeros(cw, ch, 3);
    for by in 0..ch {
        for bx in 0..cw {
            let mut acc = [0.0; 3];
            for y in by * f..(by + 1) * f {
                for x in bx * f..(bx + 1) * f {
                    let p = image.get(x, y);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            let px = out.pixel_mut(bx, by);
            for c in 0..3 {
                px[c] = acc[c] / (f * f) as f64;
            }
        }
    }
    out
}

/// Unit-length feature vectors; zero vectors stay zero.
pub(crate) fn normalize_pixels(mut map: FeatureMap) -> FeatureMap {
    let d = map.channels();
    for px in map.data_mut().chunks_mut(d) {
        let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            px.iter_mut().for_each(|v| *v /= n);
        } else {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    map
}
