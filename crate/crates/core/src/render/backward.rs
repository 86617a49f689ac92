use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::gaussian::{build_covariance, quat_matrix_vjp, quat_norm, quat_to_matrix, Gaussian3D};
use super::project::{projection_jacobian, unit_rotation, ProjectedGaussian2D};
use super::raster::{bin_and_sort, blend_tile, project_all, RenderedFrame, Splat, TileBins, TileOutput};
use super::RenderConfig;
use crate::error::{invalid, Result};
use crate::geometry::Camera;
use crate::grid::ColorImage;

/// Partials of a scalar loss with respect to every Gaussian attribute,
/// indexed like the input cloud. Culled Gaussians get zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub mean: Vec<Vector3<f64>>,
    /// With respect to the raw quaternion (normalised inside the renderer), so
    /// the gradient is tangent to the unit sphere at unit inputs.
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<Vector3<f64>>,
    pub color: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            scale: vec![Vector3::zeros(); n],
            color: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.scale).chain(&self.color).all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().flatten().all(|x| x.is_finite())
            && self.opacity.iter().all(|x| x.is_finite())
    }
}

/// Screen-space partials of one splat.
#[derive(Clone, Copy, Default)]
struct Grad2D {
    mean: [f64; 2],
    /// Symmetric conic gradient stored as (00, 01, 11).
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl Grad2D {
    fn add(&mut self, o: &Grad2D) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

#[derive(Clone, Copy)]
struct Contribution {
    pos: u32,
    alpha: f64,
    g: f64,
    t: f64,
}

fn tile_backward(
    bins: &TileBins,
    tile: usize,
    splats: &[Splat],
    adjoint: &ColorImage,
    config: &RenderConfig,
) -> (Vec<Grad2D>, TileOutput) {
    let (x0, x1, y0, y1) = bins.tile_rect(tile);
    let tw = x1 - x0;
    let mut records: Vec<Vec<Contribution>> = vec![Vec::new(); tw * (y1 - y0)];
    let out = blend_tile(bins, tile, splats, config, |i, pos, alpha, g, t| {
        records[i].push(Contribution { pos: pos as u32, alpha, g, t })
    });
    let list = bins.tile_by_id(tile);
    let mut grads = vec![Grad2D::default(); list.len()];
    let bg = config.background;
    for (i, rec) in records.iter().enumerate() {
        let (x, y) = (x0 + i % tw, y0 + i / tw);
        let adj = adjoint.get(x, y);
        if adj.iter().all(|&a| a == 0.0) {
            continue;
        }
        // colour of everything behind the current contribution, per unit transmittance
        let mut behind = bg;
        for c in rec.iter().rev() {
            let s = &splats[list[c.pos as usize] as usize];
            let gr = &mut grads[c.pos as usize];
            let mut d_alpha = 0.0;
            for k in 0..3 {
                gr.color[k] += adj[k] * c.alpha * c.t;
                d_alpha += adj[k] * c.t * (s.color[k] - behind[k]);
                behind[k] = s.color[k] * c.alpha + (1.0 - c.alpha) * behind[k];
            }
            gr.opacity += d_alpha * c.g;
            let d_power = d_alpha * c.alpha;
            let dx = x as f64 - s.u;
            let dy = y as f64 - s.v;
            gr.mean[0] += d_power * (s.ca * dx + s.cb * dy);
            gr.mean[1] += d_power * (s.cb * dx + s.cc * dy);
            gr.conic[0] += -0.5 * dx * dx * d_power;
            gr.conic[1] += -0.5 * dx * dy * d_power;
            gr.conic[2] += -0.5 * dy * dy * d_power;
        }
    }
    (grads, out)
}

/// Chain screen-space partials back to the 3D attributes of `g`.
fn chain_to_3d(g: &Gaussian3D, p: &ProjectedGaussian2D, d: &Grad2D, camera: &Camera, out: &mut RenderGradients) {
    let k = &camera.intrinsics;
    let w: &Matrix3<f64> = camera.pose.rotation();
    let t = p.cam_mean;
    let q = p.conic;
    let g_conic = Matrix2::new(d.conic[0], d.conic[1], d.conic[1], d.conic[2]);
    let g_cov2 = -(q * g_conic * q);

    let j = projection_jacobian(&t, k);
    let m = j * w;
    let qn = unit_rotation(g);
    let sigma = build_covariance(&qn, &g.scale);
    let g_sigma = m.transpose() * g_cov2 * m;
    let g_m = 2.0 * g_cov2 * m * sigma;
    let g_j = g_m * w.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (k.fx, k.fy);
    let mut dt = Vector3::new(
        d.mean[0] * fx * iz,
        d.mean[1] * fy * iz,
        -d.mean[0] * fx * t.x * iz2 - d.mean[1] * fy * t.y * iz2,
    );
    dt.z += g_j[(0, 0)] * (-fx * iz2) + g_j[(1, 1)] * (-fy * iz2);
    dt.x += g_j[(0, 2)] * (-fx * iz2);
    dt.z += g_j[(0, 2)] * (2.0 * fx * t.x * iz3);
    dt.y += g_j[(1, 2)] * (-fy * iz2);
    dt.z += g_j[(1, 2)] * (2.0 * fy * t.y * iz3);

    let i = p.index;
    out.mean[i] = w.transpose() * dt;

    let r = quat_to_matrix(&qn);
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let g_r = 2.0 * g_sigma * r * s2;
    let gq = quat_matrix_vjp(&qn, &g_r);
    let dot: f64 = (0..4).map(|c| gq[c] * qn[c]).sum();
    let norm = quat_norm(&g.rotation);
    let mut dq = [0.0; 4];
    for c in 0..4 {
        dq[c] = (gq[c] - qn[c] * dot) / norm;
    }
    out.rotation[i] = dq;
    let rgr = r.transpose() * g_sigma * r;
    out.scale[i] = Vector3::new(
        2.0 * g.scale.x * rgr[(0, 0)],
        2.0 * g.scale.y * rgr[(1, 1)],
        2.0 * g.scale.z * rgr[(2, 2)],
    );
    out.color[i] = Vector3::new(d.color[0], d.color[1], d.color[2]);
    out.opacity[i] = d.opacity;
}

/// Renders the cloud and returns the gradient of `sum(adjoint * color)` with
/// respect to every Gaussian attribute. The background and camera are constants.
pub fn render_with_gradients(
    gaussians: &[Gaussian3D],
    camera: &Camera,
    adjoint: &ColorImage,
    config: &RenderConfig,
) -> Result<(RenderedFrame, RenderGradients)> {
    config.validate()?;
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    if adjoint.width() != w || adjoint.height() != h {
        return Err(invalid(format!(
            "adjoint is {}x{} but the camera renders {}x{}",
            adjoint.width(),
            adjoint.height(),
            w,
            h
        )));
    }
    let projected = project_all(gaussians, camera, config);
    let bins = bin_and_sort(&projected, w, h, config.tile_size)?;
    let splats: Vec<Splat> = projected.iter().map(|p| Splat::new(p, config.min_alpha)).collect();
    let tiles: Vec<_> = (0..bins.num_tiles())
        .into_par_iter()
        .map(|t| tile_backward(&bins, t, &splats, adjoint, config))
        .collect();

    let mut frame = RenderedFrame::background(w, h, config.background);
    let mut grads2d = vec![Grad2D::default(); projected.len()];
    let bg = config.background;
    // fixed tile order keeps the sums bit-identical across thread counts
    for (t, (tile_grads, out)) in tiles.iter().enumerate() {
        for (pos, &e) in bins.tile_by_id(t).iter().enumerate() {
            grads2d[e as usize].add(&tile_grads[pos]);
        }
        let (x0, x1, y0, y1) = bins.tile_rect(t);
        let tw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = (y - y0) * tw + (x - x0);
                let tr = out.transmittance[i];
                let c = out.color[i];
                frame.color.set(x, y, [c[0] + tr * bg[0], c[1] + tr * bg[1], c[2] + tr * bg[2]]);
                frame.alpha.set(x, y, 1.0 - tr);
                frame.contributors.set(x, y, out.count[i]);
            }
        }
    }

    let mut grads = RenderGradients::zeros(gaussians.len());
    for (p, d) in projected.iter().zip(&grads2d) {
        chain_to_3d(&gaussians[p.index], p, d, camera, &mut grads);
    }
    Ok((frame, grads))
}
