//! Dense row-major 2D containers used throughout the crate: scalar maps,
//! masks, RGB images and multi-channel feature maps.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Result};

/// Row-major `height x width` grid. Element `(x, y)` lives at `y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type ColorImage = Grid<[f64; 3]>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!(
                "grid data has {} elements, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }

    /// Mirror along the vertical axis: column `x` moves to `width - 1 - x`.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y).clone())
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

impl Grid<f64> {
    /// Bilinear sample at continuous pixel coordinates (pixel centres at integers).
    /// Returns `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        bilinear(self.width, self.height, x, y).map(|taps| {
            taps.iter().map(|&(ix, iy, w)| w * self.get(ix, iy)).sum()
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }
}

impl ColorImage {
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        bilinear(self.width, self.height, x, y).map(|taps| {
            let mut out = [0.0; 3];
            for &(ix, iy, w) in &taps {
                let p = self.get(ix, iy);
                for c in 0..3 {
                    out[c] += w * p[c];
                }
            }
            out
        })
    }

    pub fn luminance(&self) -> Grid<f64> {
        self.map(|p| (p[0] + p[1] + p[2]) / 3.0)
    }

    pub fn channel(&self, c: usize) -> Grid<f64> {
        self.map(|p| p[c])
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Self::from_vec(w as usize, h as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in out.pixels_mut().enumerate() {
            let p = self.data[i];
            *px = image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]);
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Raw little-endian float32, channel-planar (all R, then all G, then all B).
    pub fn write_raw_planar(&self, mut out: impl Write) -> Result<()> {
        for c in 0..3 {
            for p in &self.data {
                out.write_all(&(p[c] as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::from_vec(w as usize, h as usize, img.pixels().map(|p| p[0] > 127).collect())
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear taps `(x, y, weight)`; `None` when the point falls outside the grid.
pub(crate) fn bilinear(w: usize, h: usize, x: f64, y: f64) -> Option<[(usize, usize, f64); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    Some([
        (x0, y0, (1.0 - tx) * (1.0 - ty)),
        (x1, y0, tx * (1.0 - ty)),
        (x0, y1, (1.0 - tx) * ty),
        (x1, y1, tx * ty),
    ])
}

/// Interleaved `height x width x channels` feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(invalid(format!(
                "feature data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        let n = self.width * self.channels;
        &self.data[y * n..(y + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> Grid<f64> {
        Grid::from_fn(self.width, self.height, |x, y| self.pixel(x, y)[c])
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(self.width - 1 - x, y).copy_from_slice(self.pixel(x, y));
            }
        }
        out
    }

    /// Stack channels of several equally sized maps.
    pub fn concat(maps: &[&FeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| invalid("concat of zero feature maps"))?;
        let (w, h) = (first.width, first.height);
        if maps.iter().any(|m| m.width != w || m.height != h) {
            return Err(invalid("concat of feature maps with different spatial sizes"));
        }
        let channels = maps.iter().map(|m| m.channels).sum();
        let mut out = Self::zeros(w, h, channels);
        for y in 0..h {
            for x in 0..w {
                let dst = out.pixel_mut(x, y);
                let mut o = 0;
                for m in maps {
                    dst[o..o + m.channels].copy_from_slice(m.pixel(x, y));
                    o += m.channels;
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// 1D Gaussian kernel truncated at `ceil(3 sigma)`, normalised to unit sum.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> =
        (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with clamp-to-edge borders.
pub(crate) fn convolve_separable(src: &Grid<f64>, kernel: &[f64]) -> Grid<f64> {
    let (w, h) = (src.width(), src.height());
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w.max(1)).enumerate().for_each(|(y, out)| {
        let row = src.row(y);
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * row[clamp(x as isize + i as isize - r, w)];
            }
            *o = acc;
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w.max(1)).enumerate().for_each(|(y, o)| {
        for (i, k) in kernel.iter().enumerate() {
            let sy = clamp(y as isize + i as isize - r, h);
            for (dst, v) in o.iter_mut().zip(&tmp[sy * w..(sy + 1) * w]) {
                *dst += k * v;
            }
        }
    });
    Grid { width: w, height: h, data: out }
}

pub(crate) fn gaussian_blur(src: &Grid<f64>, sigma: f64) -> Grid<f64> {
    convolve_separable(src, &gaussian_kernel(sigma))
}
