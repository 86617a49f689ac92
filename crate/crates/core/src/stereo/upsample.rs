use rayon::prelude::*;

use super::features::block_average_color;
use crate::error::{invalid, Result};
use crate::grid::{ColorImage, FeatureMap, Grid};
use crate::nn::{Activation, Conv2d, Weights};

/// How the nine weights of each fine pixel are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Upsampler {
    /// Spatial distance to each coarse cell centre times colour similarity
    /// between the fine pixel and the cell's mean colour.
    Bilateral { spatial_sigma: f64, color_sigma: f64 },
    /// All weight on the coarse cell containing the pixel.
    Nearest,
    /// `upsample.mask`: 3x3 convolution from context features to `9 F^2`
    /// logits, channel `n F^2 + sy F + sx`, softmax over `n`.
    Learned(Conv2d),
}

impl Default for Upsampler {
    fn default() -> Self {
        Upsampler::Bilateral { spatial_sigma: 1.0, color_sigma: 0.1 }
    }
}

impl Upsampler {
    pub fn from_weights(w: &Weights, context_channels: usize, factor: usize) -> Result<Self> {
        Ok(Upsampler::Learned(w.conv("upsample.mask", context_channels, 9 * factor * factor, 3)?))
    }
}

const NEIGHBOURS: [(isize, isize); 9] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Convex combination of the 3x3 coarse neighbourhood for every pixel of a
/// `guidance`-sized output. Values are multiplied by `factor`; `confidence`
/// (if given) is upsampled with the same weights and left unscaled.
pub fn convex_upsample(
    coarse: &Grid<f64>,
    confidence: Option<&Grid<f64>>,
    guidance: &ColorImage,
    context: &FeatureMap,
    factor: usize,
    upsampler: &Upsampler,
) -> Result<(Grid<f64>, Option<Grid<f64>>)> {
    let (cw, ch) = (coarse.width(), coarse.height());
    if factor == 0 || cw * factor > guidance.width() || ch * factor > guidance.height() {
        return Err(invalid("guidance image is smaller than the upsampled field"));
    }
    if confidence.is_some_and(|c| !c.same_shape(coarse)) {
        return Err(invalid("confidence does not match the coarse field"));
    }
    let (w, h) = (guidance.width(), guidance.height());
    let logits = match upsampler {
        Upsampler::Learned(conv) => {
            if context.width() != cw || context.height() != ch {
                return Err(invalid("context features do not match the coarse field"));
            }
            Some(conv.forward(context, Activation::None)?)
        }
        _ => None,
    };
    let means = match upsampler {
        Upsampler::Bilateral { .. } => Some(block_average_color(guidance, factor)),
        _ => None,
    };
    let f2 = factor * factor;
    let mut values = Grid::filled(w, h, 0.0);
    let mut conf = Grid::filled(w, h, 0.0);
    values.data_mut().par_chunks_mut(w).zip(conf.data_mut().par_chunks_mut(w)).enumerate().for_each(
        |(y, (vrow, crow))| {
            let cy = (y / factor).min(ch - 1);
            let sy = (y - cy * factor).min(factor - 1);
            let fy = (y as f64 + 0.5) / factor as f64 - 0.5;
            let mut weights = [0.0; 9];
            for x in 0..w {
                let cx = (x / factor).min(cw - 1);
                let sx = (x - cx * factor).min(factor - 1);
                let fx = (x as f64 + 0.5) / factor as f64 - 0.5;
                let cell = |n: usize| {
                    let (dx, dy) = NEIGHBOURS[n];
                    let nx = cx as isize + dx;
                    let ny = cy as isize + dy;
                    (nx, ny, nx.clamp(0, cw as isize - 1) as usize, ny.clamp(0, ch as isize - 1) as usize)
                };
                match upsampler {
                    Upsampler::Nearest => {
                        weights = [0.0; 9];
                        weights[4] = 1.0;
                    }
                    Upsampler::Bilateral { spatial_sigma, color_sigma } => {
                        let p = guidance.get(x, y);
                        let means = means.as_ref().expect("bilateral keeps block means");
                        for (n, wt) in weights.iter_mut().enumerate() {
                            let (nx, ny, qx, qy) = cell(n);
                            let ds = (fx - nx as f64).powi(2) + (fy - ny as f64).powi(2);
                            let m = means.pixel(qx, qy);
                            let dc = (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2) + (p[2] - m[2]).powi(2);
                            *wt = (-ds / (2.0 * spatial_sigma * spatial_sigma) - dc / (2.0 * color_sigma * color_sigma)).exp();
                        }
                        if weights.iter().sum::<f64>() < 1e-300 {
                            weights = [0.0; 9];
                            weights[4] = 1.0;
                        }
                    }
                    Upsampler::Learned(_) => {
                        let l = logits.as_ref().expect("learned mode has logits").pixel(cx, cy);
                        let at = |n: usize| l[n * f2 + sy * factor + sx];
                        let top = (0..9).map(at).fold(f64::NEG_INFINITY, f64::max);
                        for (n, wt) in weights.iter_mut().enumerate() {
                            *wt = (at(n) - top).exp();
                        }
                    }
                }
                let total: f64 = weights.iter().sum();
                let (mut v, mut c) = (0.0, 0.0);
                for (n, &wt) in weights.iter().enumerate() {
                    let (_, _, qx, qy) = cell(n);
                    let wn = wt / total;
                    v += wn * coarse.get(qx, qy);
                    if let Some(conf) = confidence {
                        c += wn * conf.get(qx, qy);
                    }
                }
                vrow[x] = v * factor as f64;
                crow[x] = c;
            }
        },
    );
    Ok((values, confidence.map(|_| conf)))
}
