//! Per-frame refinement of the two views' parameter maps against held-out
//! target images, through the differentiable renderer.

use serde::{Deserialize, Serialize};

use super::chamfer::{chamfer_with_gradient, CHAMFER_MAX_POINTS};
use super::{image_metrics, rendering_loss_with_gradient, total_loss, LossParts, LossReport, LossWeights};
use crate::error::{invalid, Error, Result};
use crate::geometry::{Camera, DepthMap, ProjectionMatrix};
use crate::grid::{ColorImage, Grid, Mask};
use crate::mapper::{camera_to_world_quat, lift_to_gaussians, ActivationConfig, GaussianParameterMaps};
use crate::render::{render, render_with_gradients, normalize_quat, Gaussian3D, RenderConfig, SourceView};

/// One source view: its parameter maps and the geometry they are lifted with.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineSource {
    pub maps: GaussianParameterMaps,
    pub depth: DepthMap,
    pub projection: ProjectionMatrix,
    pub view: SourceView,
}

/// A held-out image the merged cloud is rendered against.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetView {
    pub image: ColorImage,
    pub camera: Camera,
    pub mask: Option<Mask>,
}

/// Step sizes per attribute. Scale steps act on `ln s`, rotation steps in the
/// tangent space of the unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub residual: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { residual: 1e-3, color: 1e-2, opacity: 1e-2, scale: 1e-3, rotation: 1e-3 }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self { residual: 0.0, color: 0.0, opacity: 0.0, scale: 0.0, rotation: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `x -= lr * g`.
    #[default]
    Gradient,
    /// Per-coordinate normalised steps; the learning rate is the step length.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub steps: usize,
    pub learning_rates: LearningRates,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    pub render: RenderConfig,
    pub activation: ActivationConfig,
    pub refine_color: bool,
    /// Abort once the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rates: LearningRates::default(),
            optimizer: Optimizer::Gradient,
            weights: LossWeights::default(),
            render: RenderConfig::default(),
            activation: ActivationConfig::default(),
            refine_color: true,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub left: GaussianParameterMaps,
    pub right: GaussianParameterMaps,
    /// Loss at the starting maps, after every step, so `steps + 1` entries.
    pub trajectory: Vec<LossReport>,
}

/// Gradients with respect to one view's maps, indexed by pixel.
struct MapGradients {
    residual: Vec<f64>,
    color: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    scale: Vec<[f64; 3]>,
    rotation: Vec<[f64; 4]>,
}

impl MapGradients {
    fn zeros(n: usize) -> Self {
        Self {
            residual: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            scale: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
        }
    }
}

/// First and second moments for one attribute.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn delta(&mut self, i: usize, g: f64, lr: f64, opt: Optimizer, t: i32) -> f64 {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        match opt {
            Optimizer::Gradient => lr * g,
            Optimizer::Adam => {
                self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                let mh = self.m[i] / (1.0 - B1.powi(t));
                let vh = self.v[i] / (1.0 - B2.powi(t));
                lr * mh / (vh.sqrt() + EPS)
            }
        }
    }
}

struct ViewState {
    residual: Moments,
    color: Moments,
    opacity: Moments,
    scale: Moments,
    rotation: Moments,
}

impl ViewState {
    fn new(n: usize) -> Self {
        Self {
            residual: Moments::new(n),
            color: Moments::new(3 * n),
            opacity: Moments::new(n),
            scale: Moments::new(3 * n),
            rotation: Moments::new(4 * n),
        }
    }
}

/// Transpose of the left-multiplication matrix of `a`, applied to `g`.
fn left_mul_transpose(a: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    [
        aw * g[0] + ax * g[1] + ay * g[2] + az * g[3],
        -ax * g[0] + aw * g[1] + az * g[2] - ay * g[3],
        -ay * g[0] - az * g[1] + aw * g[2] + ax * g[3],
        -az * g[0] + ay * g[1] - ax * g[2] + aw * g[3],
    ]
}

fn evaluate(
    sources: [&RefineSource; 2],
    maps: [&GaussianParameterMaps; 2],
    targets: &[TargetView],
    masks: &[Mask],
    cfg: &RefineConfig,
    gradient: bool,
) -> Result<(LossReport, Option<[MapGradients; 2]>)> {
    let mut gaussians: Vec<Gaussian3D> = Vec::new();
    // (view, pixel index) of every Gaussian
    let mut owners: Vec<(usize, usize)> = Vec::new();
    let mut split = 0;
    for (v, (src, m)) in sources.iter().zip(maps).enumerate() {
        let lifted = lift_to_gaussians(m, &src.depth, &src.projection, src.view)?;
        let w = m.width();
        for (g, tag) in lifted.cloud.gaussians.into_iter().zip(lifted.cloud.sources) {
            let t = tag.expect("lifted Gaussians carry their pixel");
            gaussians.push(g);
            owners.push((v, t.y as usize * w + t.x as usize));
        }
        if v == 0 {
            split = gaussians.len();
        }
    }
    if gaussians.is_empty() {
        return Err(invalid("no Gaussians to refine"));
    }

    let n_views = targets.len() as f64;
    let mut parts = LossParts::default();
    let mut mean_grad = vec![nalgebra::Vector3::zeros(); gaussians.len()];
    let mut attr = gradient.then(|| crate::render::RenderGradients::zeros(gaussians.len()));
    for (t, mask) in targets.iter().zip(masks) {
        let frame = render(&gaussians, &t.camera, &cfg.render)?;
        let (psnr, ssim) = image_metrics(&frame.color, &t.image, mask)?;
        parts.psnr += psnr / n_views;
        parts.ssim_metric += ssim / n_views;
        let loss = rendering_loss_with_gradient(&frame.color, &t.image, mask, &cfg.weights)?;
        parts.l_mae += loss.l_mae / n_views;
        parts.l_ssim += loss.l_ssim / n_views;
        if let Some(acc) = attr.as_mut() {
            let adjoint = loss.gradient.expect("requested").map(|p| p.map(|v| v / n_views));
            let (_, g) = render_with_gradients(&gaussians, &t.camera, &adjoint, &cfg.render)?;
            for i in 0..gaussians.len() {
                mean_grad[i] += g.mean[i];
                acc.color[i] += g.color[i];
                acc.opacity[i] += g.opacity[i];
                acc.scale[i] += g.scale[i];
                for k in 0..4 {
                    acc.rotation[i][k] += g.rotation[i][k];
                }
            }
        }
    }

    if cfg.weights.alpha_cd > 0.0 && split > 0 && split < gaussians.len() {
        let stride = |n: usize| n.div_ceil(CHAMFER_MAX_POINTS).max(1);
        let (sl, sr) = (stride(split), stride(gaussians.len() - split));
        let li: Vec<usize> = (0..split).step_by(sl).collect();
        let ri: Vec<usize> = (split..gaussians.len()).step_by(sr).collect();
        let pl: Vec<_> = li.iter().map(|&i| gaussians[i].mean).collect();
        let pr: Vec<_> = ri.iter().map(|&i| gaussians[i].mean).collect();
        let (cd, gl, gr) = chamfer_with_gradient(&pl, &pr)?;
        parts.l_cd = cd;
        if gradient {
            for (&i, g) in li.iter().zip(&gl).chain(ri.iter().zip(&gr)) {
                mean_grad[i] += cfg.weights.alpha_cd * g;
            }
        }
    }
    let report = total_loss(&parts, &cfg.weights);

    let grads = attr.map(|acc| {
        let mut out = [MapGradients::zeros(maps[0].valid.len()), MapGradients::zeros(maps[1].valid.len())];
        let to_world = [camera_to_world_quat(&sources[0].projection), camera_to_world_quat(&sources[1].projection)];
        for (i, &(v, p)) in owners.iter().enumerate() {
            let (w, o) = (maps[v].width(), &mut out[v]);
            let ray = sources[v].projection.ray((p % w) as f64, (p / w) as f64);
            o.residual[p] = mean_grad[i].dot(&ray);
            o.color[p] = acc.color[i].into();
            o.opacity[p] = acc.opacity[i];
            o.scale[p] = acc.scale[i].into();
            o.rotation[p] = left_mul_transpose(&to_world[v], &acc.rotation[i]);
        }
        out
    });
    Ok((report, grads))
}

/// `pixels` converts gradients of the mean-reduced losses into gradients of
/// their sum over supervised pixels, so learning rates do not depend on the
/// image size.
fn step_maps(
    maps: &mut GaussianParameterMaps,
    g: &MapGradients,
    state: &mut ViewState,
    cfg: &RefineConfig,
    pixels: f64,
    t: i32,
) {
    let lr = &cfg.learning_rates;
    let opt = cfg.optimizer;
    let act = &cfg.activation;
    let limit = act.gamma * (1.0 - 1e-9);
    for p in 0..maps.valid.len() {
        if !maps.valid.data()[p] {
            continue;
        }
        let d = state.residual.delta(p, pixels * g.residual[p], lr.residual, opt, t);
        let r = &mut maps.residual.data_mut()[p];
        *r = (*r - d).clamp(-limit, limit);

        let o = &mut maps.opacity.data_mut()[p];
        *o = (*o - state.opacity.delta(p, pixels * g.opacity[p], lr.opacity, opt, t)).clamp(0.0, 1.0);

        if cfg.refine_color {
            let c = &mut maps.color.data_mut()[p];
            for k in 0..3 {
                c[k] -= state.color.delta(3 * p + k, pixels * g.color[p][k], lr.color, opt, t);
            }
        }

        let s = &mut maps.scale.data_mut()[p];
        for k in 0..3 {
            let d = state.scale.delta(3 * p + k, pixels * g.scale[p][k] * s[k], lr.scale, opt, t);
            if d != 0.0 {
                s[k] = (s[k].ln() - d).exp().clamp(act.scale_min, act.scale_max);
            }
        }

        let q = &mut maps.rotation.data_mut()[p];
        let gq = g.rotation[p].map(|v| pixels * v);
        let radial: f64 = (0..4).map(|k| gq[k] * q[k]).sum();
        let mut next = *q;
        for k in 0..4 {
            next[k] -= state.rotation.delta(4 * p + k, gq[k] - radial * q[k], lr.rotation, opt, t);
        }
        if next != *q {
            if let Some(n) = normalize_quat(&next) {
                *q = n;
            }
        }
    }
}

/// Refines both views' maps for `cfg.steps` steps and returns the loss at
/// every iterate. Fails on divergence or if a map leaves its valid range.
pub fn refine_gaussian_maps(
    left: &RefineSource,
    right: &RefineSource,
    targets: &[TargetView],
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    if targets.is_empty() {
        return Err(invalid("refinement needs at least one target view"));
    }
    if cfg.steps == 0 {
        return Err(invalid("refinement needs at least one step"));
    }
    cfg.weights.validate()?;
    cfg.render.validate()?;
    let masks: Vec<Mask> = targets
        .iter()
        .map(|t| {
            let (w, h) = (t.camera.intrinsics.width, t.camera.intrinsics.height);
            if t.image.width() != w || t.image.height() != h {
                return Err(invalid("target image does not match its camera"));
            }
            match &t.mask {
                Some(m) if m.width() == w && m.height() == h => Ok(m.clone()),
                Some(_) => Err(invalid("target mask does not match its camera")),
                None => Ok(Grid::filled(w, h, true)),
            }
        })
        .collect::<Result<_>>()?;
    let sources = [left, right];
    let mut maps = [left.maps.clone(), right.maps.clone()];
    for m in &maps {
        m.check(&cfg.activation)?;
    }
    let pixels = masks.iter().map(|m| m.count()).sum::<usize>() as f64 / masks.len() as f64;
    if pixels == 0.0 {
        return Err(invalid("target masks select no pixels"));
    }
    let mut states = [ViewState::new(maps[0].valid.len()), ViewState::new(maps[1].valid.len())];
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let mut initial = None;
    for step in 0..cfg.steps {
        let (report, grads) = evaluate(sources, [&maps[0], &maps[1]], targets, &masks, cfg, true)?;
        let init = *initial.get_or_insert(report.l_total);
        if !report.l_total.is_finite() || report.l_total > cfg.divergence_factor * init {
            return Err(Error::Divergence { step, loss: report.l_total, initial: init });
        }
        trajectory.push(report);
        let grads = grads.expect("requested");
        for v in 0..2 {
            step_maps(&mut maps[v], &grads[v], &mut states[v], cfg, pixels, step as i32 + 1);
            maps[v].check(&cfg.activation)?;
        }
    }
    let (last, _) = evaluate(sources, [&maps[0], &maps[1]], targets, &masks, cfg, false)?;
    let init = initial.expect("at least one step");
    if !last.l_total.is_finite() || last.l_total > cfg.divergence_factor * init {
        return Err(Error::Divergence { step: cfg.steps, loss: last.l_total, initial: init });
    }
    trajectory.push(last);
    let [l, r] = maps;
    Ok(RefineOutcome { left: l, right: r, trajectory })
}
