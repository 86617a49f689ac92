use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::{FeatureMap, Grid};

/// All-pairs correlation `C[i][j][k] = <f_l(i, j), f_r(i, k)>` plus copies
/// average-pooled along `k` with window 2.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    height: usize,
    width: usize,
    /// `levels[0]` is the full volume; level `l` has `widths[l]` entries per row.
    levels: Vec<Vec<f64>>,
    widths: Vec<usize>,
}

impl CostVolume {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.widths[level]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.levels[0][(i * self.width + j) * self.width + k]
    }

    /// Row `k = 0..width` of the full-resolution volume at pixel `(i, j)`.
    #[inline]
    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let w = self.width;
        &self.levels[0][(i * w + j) * w..(i * w + j + 1) * w]
    }

    /// Linear interpolation along `k` at pooled level `level`, clamped to the row.
    #[inline]
    pub fn sample(&self, level: usize, i: usize, j: usize, k: f64) -> f64 {
        let n = self.widths[level];
        let row = &self.levels[level][(i * self.width + j) * n..(i * self.width + j + 1) * n];
        let k = k.clamp(0.0, (n - 1) as f64);
        let k0 = (k.floor() as usize).min(n - 1);
        let k1 = (k0 + 1).min(n - 1);
        let t = k - k0 as f64;
        row[k0] * (1.0 - t) + row[k1] * t
    }

    /// Replace the full-resolution data, keeping shape; rebuilds the pyramid.
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>, levels: usize) -> Result<Self> {
        if data.len() != height * width * width {
            return Err(invalid("cost volume data has the wrong length"));
        }
        Ok(Self::with_pyramid(height, width, data, levels))
    }

    fn with_pyramid(height: usize, width: usize, base: Vec<f64>, levels: usize) -> Self {
        let mut out = vec![base];
        let mut widths = vec![width];
        for _ in 1..levels.max(1) {
            let prev_w = *widths.last().unwrap();
            if prev_w < 2 {
                break;
            }
            let n = prev_w / 2;
            let prev = out.last().unwrap();
            let mut next = vec![0.0; height * width * n];
            next.par_chunks_mut(n).enumerate().for_each(|(p, dst)| {
                let src = &prev[p * prev_w..(p + 1) * prev_w];
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = 0.5 * (src[2 * k] + src[2 * k + 1]);
                }
            });
            out.push(next);
            widths.push(n);
        }
        Self { height, width, levels: out, widths }
    }
}

/// Number of pooled levels (including the full volume) built by default.
pub const DEFAULT_VOLUME_LEVELS: usize = 4;

pub fn build_cost_volume(left: &FeatureMap, right: &FeatureMap, levels: usize) -> Result<CostVolume> {
    if !left.same_shape(right) {
        return Err(invalid("cost volume inputs differ in shape"));
    }
    let (w, h, d) = (left.width(), left.height(), left.channels());
    let mut data = vec![0.0; h * w * w];
    data.par_chunks_mut(w * w).enumerate().for_each(|(i, slab)| {
        for j in 0..w {
            let fl = left.pixel(j, i);
            for k in 0..w {
                let fr = right.pixel(k, i);
                let mut acc = 0.0;
                for c in 0..d {
                    acc += fl[c] * fr[c];
                }
                slab[j * w + k] = acc;
            }
        }
    });
    Ok(CostVolume::with_pyramid(h, w, data, levels))
}

/// Column coordinate at pooled level `l` of full-resolution column `k`.
#[inline]
pub(crate) fn level_coordinate(k: f64, level: usize) -> f64 {
    let s = (1usize << level) as f64;
    (k - (s - 1.0) / 2.0) / s
}

/// For each pixel and pyramid level, `2 * radius + 1` samples of the cost at
/// columns `c + m`, `m = -radius..=radius`, where `c` is column `j - d` mapped to
/// that level. Channel `level * (2r + 1) + (m + r)`.
pub fn lookup_cost(volume: &CostVolume, disparity: &Grid<f64>, radius: usize) -> Result<FeatureMap> {
    if radius < 1 {
        return Err(invalid("lookup radius must be at least 1"));
    }
    if disparity.width() != volume.width() || disparity.height() != volume.height() {
        return Err(invalid("disparity field does not match the cost volume"));
    }
    let taps = 2 * radius + 1;
    let levels = volume.num_levels();
    let (w, h) = (volume.width(), volume.height());
    let mut out = FeatureMap::zeros(w, h, levels * taps);
    let r = radius as isize;
    out.data_mut().par_chunks_mut(w * levels * taps).enumerate().for_each(|(i, row)| {
        for j in 0..w {
            let k = j as f64 - disparity.get(j, i);
            for l in 0..levels {
                let c = level_coordinate(k, l);
                for m in -r..=r {
                    row[(j * levels + l) * taps + (m + r) as usize] = volume.sample(l, i, j, c + m as f64);
                }
            }
        }
    });
    Ok(out)
}

/// Softmax temperature of the confidence measure.
pub const CONFIDENCE_TEMPERATURE: f64 = 0.05;

/// Softmax mass of the full-resolution cost row within two columns of the
/// matched column `j - d`. Rows without any cost variation get zero.
pub fn match_confidence(volume: &CostVolume, disparity: &Grid<f64>, temperature: f64) -> Result<Grid<f64>> {
    if disparity.width() != volume.width() || disparity.height() != volume.height() {
        return Err(invalid("disparity field does not match the cost volume"));
    }
    if !(temperature > 0.0) {
        return Err(invalid("confidence temperature must be positive"));
    }
    let w = volume.width();
    let mut out = Grid::filled(w, volume.height(), 0.0);
    out.data_mut().par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        for (j, dst) in row.iter_mut().enumerate() {
            let c = volume.row(i, j);
            let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
            if hi - lo < 1e-9 {
                continue;
            }
            let centre = j as f64 - disparity.get(j, i);
            let (mut total, mut near) = (0.0, 0.0);
            for (k, &v) in c.iter().enumerate() {
                let p = ((v - hi) / temperature).exp();
                total += p;
                if (k as f64 - centre).abs() <= 2.0 {
                    near += p;
                }
            }
            *dst = near / total;
        }
    });
    Ok(out)
}
