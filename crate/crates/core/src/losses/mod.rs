//! Rendering, depth and Chamfer losses, image metrics, and the per-frame
//! refinement loop over Gaussian parameter maps.

mod chamfer;
mod refine;
mod ssim;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use chamfer::{
    chamfer_distance, chamfer_exact, chamfer_with_gradient, nearest_neighbors, stride_subsample, PointGrid,
    CHAMFER_MAX_POINTS,
};
pub use refine::{
    refine_gaussian_maps, LearningRates, Optimizer, RefineConfig, RefineOutcome, RefineSource, TargetView,
};
pub use ssim::{ssim_map, SSIM_C1, SSIM_C2, SSIM_SIGMA};

use crate::error::{invalid, Result};
use crate::grid::{ColorImage, Grid, Mask};
use crate::stereo::{disparity_metrics, DisparityMetrics};

/// Reported when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
    pub alpha_cd: f64,
    pub beta_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.8, lambda2: 0.2, mu: 0.9, alpha_cd: 0.5, beta_depth: 0.0 }
    }
}

impl LossWeights {
    /// Chamfer weight for scenes with a large depth range.
    pub fn large_depth_range() -> Self {
        Self { alpha_cd: 0.005, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.mu, self.alpha_cd, self.beta_depth];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !(self.lambda1 + self.lambda2 > 0.0) {
            return Err(invalid("lambda1 + lambda2 must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mae: f64,
    pub l_ssim: f64,
    pub l_render: f64,
    pub l_depth: f64,
    pub l_cd: f64,
    pub l_total: f64,
    pub psnr: f64,
    pub ssim_metric: f64,
    pub epe: Option<f64>,
    pub ratio_1px: Option<f64>,
}

/// Inputs to [`total_loss`]. `l_depth` is `None` without ground-truth depth.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_mae: f64,
    pub l_ssim: f64,
    pub l_cd: f64,
    pub l_depth: Option<f64>,
    pub psnr: f64,
    pub ssim_metric: f64,
    pub disparity: Option<DisparityMetrics>,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> LossReport {
    let l_render = w.lambda1 * parts.l_mae + w.lambda2 * parts.l_ssim;
    let (l_depth, beta) = match parts.l_depth {
        Some(d) => (d, w.beta_depth),
        None => (0.0, 0.0),
    };
    LossReport {
        l_mae: parts.l_mae,
        l_ssim: parts.l_ssim,
        l_render,
        l_depth,
        l_cd: parts.l_cd,
        l_total: l_render + w.alpha_cd * parts.l_cd + beta * l_depth,
        psnr: parts.psnr,
        ssim_metric: parts.ssim_metric,
        epe: parts.disparity.map(|d| d.epe),
        ratio_1px: parts.disparity.map(|d| d.one_pixel_ratio),
    }
}

fn check_pair(a: &ColorImage, b: &ColorImage, mask: &Mask) -> Result<()> {
    if !a.same_shape(b) || !a.same_shape(mask) {
        return Err(invalid("images and mask differ in size"));
    }
    if mask.count() == 0 {
        return Err(invalid("mask selects no pixels"));
    }
    Ok(())
}

/// Rendering loss terms and the per-pixel gradient of `l_render` with respect
/// to `rendered`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderLoss {
    pub l_mae: f64,
    pub l_ssim: f64,
    pub l_render: f64,
    pub gradient: Option<ColorImage>,
}

fn rendering_loss_impl(
    rendered: &ColorImage,
    truth: &ColorImage,
    mask: &Mask,
    w: &LossWeights,
    gradient: bool,
) -> Result<RenderLoss> {
    check_pair(rendered, truth, mask)?;
    let n = (mask.count() * 3) as f64;
    let mut l_mae = 0.0;
    for ((r, t), &m) in rendered.data().iter().zip(truth.data()).zip(mask.data()) {
        if m {
            l_mae += (0..3).map(|c| (r[c] - t[c]).abs()).sum::<f64>();
        }
    }
    l_mae /= n;
    let (ssim, ssim_grad) = ssim::masked_ssim(rendered, truth, mask, gradient);
    let l_ssim = 1.0 - ssim;
    let gradient = ssim_grad.map(|sg| {
        let mut g = Grid::filled(rendered.width(), rendered.height(), [0.0; 3]);
        for (i, px) in g.data_mut().iter_mut().enumerate() {
            let (r, t) = (rendered.data()[i], truth.data()[i]);
            let m = if mask.data()[i] { 1.0 / n } else { 0.0 };
            for c in 0..3 {
                let sign = (r[c] - t[c]).signum() * ((r[c] - t[c]) != 0.0) as u8 as f64;
                px[c] = w.lambda1 * m * sign - w.lambda2 * sg.data()[i][c];
            }
        }
        g
    });
    Ok(RenderLoss { l_mae, l_ssim, l_render: w.lambda1 * l_mae + w.lambda2 * l_ssim, gradient })
}

/// `(l_mae, l_ssim, l_render)` over masked pixels.
pub fn rendering_loss(rendered: &ColorImage, truth: &ColorImage, mask: &Mask, w: &LossWeights) -> Result<(f64, f64, f64)> {
    let r = rendering_loss_impl(rendered, truth, mask, w, false)?;
    Ok((r.l_mae, r.l_ssim, r.l_render))
}

pub fn rendering_loss_with_gradient(
    rendered: &ColorImage,
    truth: &ColorImage,
    mask: &Mask,
    w: &LossWeights,
) -> Result<RenderLoss> {
    rendering_loss_impl(rendered, truth, mask, w, true)
}

/// `sum_t mu^(T-t) * mean |d_gt - d^t|` over valid pixels.
pub fn depth_loss(trace: &[Grid<f64>], truth: &Grid<f64>, mask: &Mask, mu: f64) -> Result<f64> {
    if trace.is_empty() {
        return Err(invalid("disparity trace is empty"));
    }
    if !truth.same_shape(mask) || trace.iter().any(|d| !d.same_shape(truth)) {
        return Err(invalid("disparity trace, truth and mask differ in size"));
    }
    let n = mask.count();
    if n == 0 {
        return Err(invalid("mask selects no pixels"));
    }
    let t_last = trace.len() - 1;
    let mut total = 0.0;
    for (t, d) in trace.iter().enumerate() {
        let err: f64 = d
            .data()
            .iter()
            .zip(truth.data())
            .zip(mask.data())
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b).abs())
            .sum();
        total += mu.powi((t_last - t) as i32) * err / n as f64;
    }
    Ok(total)
}

/// PSNR with peak 1 and mean SSIM, over masked pixels.
pub fn image_metrics(rendered: &ColorImage, truth: &ColorImage, mask: &Mask) -> Result<(f64, f64)> {
    check_pair(rendered, truth, mask)?;
    Ok((psnr_unchecked(rendered, truth, mask), ssim::masked_ssim(rendered, truth, mask, false).0))
}

pub fn psnr(rendered: &ColorImage, truth: &ColorImage, mask: &Mask) -> Result<f64> {
    check_pair(rendered, truth, mask)?;
    Ok(psnr_unchecked(rendered, truth, mask))
}

fn psnr_unchecked(rendered: &ColorImage, truth: &ColorImage, mask: &Mask) -> f64 {
    let mut se = 0.0;
    for ((r, t), &m) in rendered.data().iter().zip(truth.data()).zip(mask.data()) {
        if m {
            se += (0..3).map(|c| (r[c] - t[c]).powi(2)).sum::<f64>();
        }
    }
    let mse = se / (mask.count() * 3) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Mean end-point error and fraction below one pixel.
pub fn epe_metrics(predicted: &Grid<f64>, truth: &Grid<f64>, mask: &Mask) -> Result<DisparityMetrics> {
    disparity_metrics(predicted, truth, mask)
}

/// One row per report, headed by the field names. Missing optional values are empty.
pub fn write_trajectory_csv(reports: &[LossReport], out: impl Write) -> Result<()> {
    let csv_err = |e: csv::Error| crate::error::Error::Format(format!("CSV: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step", "l_mae", "l_ssim", "l_render", "l_depth", "l_cd", "l_total", "psnr", "ssim_metric", "epe", "ratio_1px",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (step, r) in reports.iter().enumerate() {
        let mut row = vec![step.to_string()];
        row.extend(
            [r.l_mae, r.l_ssim, r.l_render, r.l_depth, r.l_cd, r.l_total, r.psnr, r.ssim_metric].map(|v| v.to_string()),
        );
        row.push(opt(r.epe));
        row.push(opt(r.ratio_1px));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
