//! Windowed SSIM with a Gaussian window renormalised at the borders, and its
//! gradient with respect to the first image.

use rayon::prelude::*;

use crate::grid::{gaussian_kernel, ColorImage, Grid, Mask};

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Zero-padded separable filter. The kernel is symmetric, so this is its own adjoint.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        let row = &src[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = x as isize + i as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * row[sx as usize];
                }
            }
            *o = acc;
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, o)| {
        for (i, kv) in k.iter().enumerate() {
            let sy = y as isize + i as isize - r;
            if sy >= 0 && (sy as usize) < h {
                let sy = sy as usize;
                for (dst, v) in o.iter_mut().zip(&tmp[sy * w..(sy + 1) * w]) {
                    *dst += kv * v;
                }
            }
        }
    });
    out
}

struct Window {
    kernel: Vec<f64>,
    /// Reciprocal of the in-image kernel mass at each pixel.
    inv_mass: Vec<f64>,
    w: usize,
    h: usize,
}

impl Window {
    fn new(w: usize, h: usize) -> Self {
        let kernel = gaussian_kernel(SSIM_SIGMA);
        let inv_mass = filter(&vec![1.0; w * h], w, h, &kernel).into_iter().map(|m| 1.0 / m).collect();
        Self { kernel, inv_mass, w, h }
    }

    fn mean(&self, src: &[f64]) -> Vec<f64> {
        let mut out = filter(src, self.w, self.h, &self.kernel);
        out.iter_mut().zip(&self.inv_mass).for_each(|(o, m)| *o *= m);
        out
    }

    /// Adjoint of [`Window::mean`].
    fn mean_adjoint(&self, a: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = a.iter().zip(&self.inv_mass).map(|(v, m)| v * m).collect();
        filter(&scaled, self.w, self.h, &self.kernel)
    }
}

fn plane(img: &ColorImage, c: usize) -> Vec<f64> {
    img.data().iter().map(|p| p[c]).collect()
}

/// Per-pixel statistics of one channel.
struct Stats {
    mx: Vec<f64>,
    my: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    cxy: Vec<f64>,
}

fn stats(win: &Window, x: &[f64], y: &[f64]) -> Stats {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = win.mean(x);
    let my = win.mean(y);
    let exx = win.mean(&sq(x, x));
    let eyy = win.mean(&sq(y, y));
    let exy = win.mean(&sq(x, y));
    let n = x.len();
    let vx = (0..n).map(|i| exx[i] - mx[i] * mx[i]).collect();
    let vy = (0..n).map(|i| eyy[i] - my[i] * my[i]).collect();
    let cxy = (0..n).map(|i| exy[i] - mx[i] * my[i]).collect();
    Stats { mx, my, vx, vy, cxy }
}

fn ssim_at(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * cxy + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = vx + vy + SSIM_C2;
    (a1 * a2) / (b1 * b2)
}

/// Per-pixel SSIM averaged over the three channels.
pub fn ssim_map(x: &ColorImage, y: &ColorImage) -> Grid<f64> {
    let (w, h) = (x.width(), x.height());
    let win = Window::new(w, h);
    let mut out = vec![0.0; w * h];
    for c in 0..3 {
        let s = stats(&win, &plane(x, c), &plane(y, c));
        for (i, o) in out.iter_mut().enumerate() {
            *o += ssim_at(s.mx[i], s.my[i], s.vx[i], s.vy[i], s.cxy[i]) / 3.0;
        }
    }
    Grid::from_vec(w, h, out).expect("sizes agree")
}

/// Mean SSIM over masked pixels and channels, with its gradient with respect
/// to `x` when requested. Callers check shapes and that the mask is nonempty.
pub(crate) fn masked_ssim(x: &ColorImage, y: &ColorImage, mask: &Mask, gradient: bool) -> (f64, Option<ColorImage>) {
    let (w, h) = (x.width(), x.height());
    let win = Window::new(w, h);
    let n = (mask.count() * 3) as f64;
    let m: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 / n } else { 0.0 }).collect();
    let mut total = 0.0;
    let mut grad = gradient.then(|| Grid::filled(w, h, [0.0; 3]));
    for c in 0..3 {
        let (xp, yp) = (plane(x, c), plane(y, c));
        let s = stats(&win, &xp, &yp);
        let mut a = vec![0.0; w * h];
        let mut bx = vec![0.0; w * h];
        let mut by = vec![0.0; w * h];
        for i in 0..w * h {
            if m[i] == 0.0 {
                continue;
            }
            let (mx, my) = (s.mx[i], s.my[i]);
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * s.cxy[i] + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = s.vx[i] + s.vy[i] + SSIM_C2;
            let v = (a1 * a2) / (b1 * b2);
            total += v;
            if gradient {
                let d_mx = 2.0 * my * a2 / (b1 * b2) - v * 2.0 * mx / b1;
                let d_vx = -v / b2;
                let d_cxy = 2.0 * a1 / (b1 * b2);
                a[i] = m[i] * (d_mx - 2.0 * mx * d_vx - my * d_cxy);
                bx[i] = m[i] * 2.0 * d_vx;
                by[i] = m[i] * d_cxy;
            }
        }
        if let Some(g) = grad.as_mut() {
            let (ga, gx, gy) = (win.mean_adjoint(&a), win.mean_adjoint(&bx), win.mean_adjoint(&by));
            for (i, px) in g.data_mut().iter_mut().enumerate() {
                px[c] = ga[i] + xp[i] * gx[i] + yp[i] * gy[i];
            }
        }
    }
    (total / n, grad)
}
