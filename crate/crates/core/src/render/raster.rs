use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian::Gaussian3D;
use super::project::{project_indexed, ProjectedGaussian2D};
use super::RenderConfig;
use crate::error::{invalid, Result};
use crate::geometry::Camera;
use crate::grid::{ColorImage, Grid};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub color: ColorImage,
    /// Accumulated opacity, `1 - T_final`.
    pub alpha: Grid<f64>,
    /// Number of blended contributions per pixel.
    pub contributors: Grid<u32>,
}

impl RenderedFrame {
    pub fn background(width: usize, height: usize, bg: [f64; 3]) -> Self {
        Self {
            color: Grid::filled(width, height, bg),
            alpha: Grid::filled(width, height, 0.0),
            contributors: Grid::filled(width, height, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderTimings {
    pub ms_project: f64,
    pub ms_sort: f64,
    pub ms_blend: f64,
}

impl RenderTimings {
    pub fn total_ms(&self) -> f64 {
        self.ms_project + self.ms_sort + self.ms_blend
    }
}

/// Per-tile lists of indices into the projected slice, each sorted by depth then index.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

impl TileBins {
    pub fn num_tiles(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn tile(&self, tx: usize, ty: usize) -> &[u32] {
        self.tile_by_id(ty * self.tiles_x + tx)
    }

    pub(crate) fn tile_by_id(&self, id: usize) -> &[u32] {
        &self.entries[self.offsets[id]..self.offsets[id + 1]]
    }

    pub fn total_entries(&self) -> usize {
        self.entries.len()
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` of a tile.
    pub(crate) fn tile_rect(&self, id: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (id % self.tiles_x, id / self.tiles_x);
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, (x0 + self.tile_size).min(self.width), y0, (y0 + self.tile_size).min(self.height))
    }
}

/// Inclusive pixel range covered by a splat along one axis, clipped to `[0, n)`.
#[inline]
pub(crate) fn pixel_span(center: f64, radius: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(n as f64 - 1.0);
    if lo > hi {
        return None;
    }
    Some((lo as usize, hi as usize))
}

pub fn project_all(gaussians: &[Gaussian3D], camera: &Camera, config: &RenderConfig) -> Vec<ProjectedGaussian2D> {
    let (pose, k) = (&camera.pose, &camera.intrinsics);
    gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_indexed(i, g, pose, k, config))
        .collect()
}

pub fn bin_and_sort(projected: &[ProjectedGaussian2D], width: usize, height: usize, tile_size: usize) -> Result<TileBins> {
    if tile_size < 4 {
        return Err(invalid(format!("tile size must be at least 4, got {tile_size}")));
    }
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let n_tiles = tiles_x * tiles_y;
    let tile_range = |p: &ProjectedGaussian2D| {
        let (x0, x1) = pixel_span(p.mean.x, p.radius, width)?;
        let (y0, y1) = pixel_span(p.mean.y, p.radius, height)?;
        Some((x0 / tile_size, x1 / tile_size, y0 / tile_size, y1 / tile_size))
    };
    let ranges: Vec<_> = projected.par_iter().map(tile_range).collect();

    // one global (depth, index) sort; the stable fill below keeps that order per tile
    let mut order: Vec<u32> = (0..projected.len() as u32).filter(|&i| ranges[i as usize].is_some()).collect();
    order.par_sort_unstable_by(|&a, &b| {
        let (pa, pb) = (&projected[a as usize], &projected[b as usize]);
        pa.depth.total_cmp(&pb.depth).then(pa.index.cmp(&pb.index))
    });

    let mut counts = vec![0usize; n_tiles + 1];
    for (tx0, tx1, ty0, ty1) in ranges.iter().flatten() {
        for ty in *ty0..=*ty1 {
            for tx in *tx0..=*tx1 {
                counts[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for i in 0..n_tiles {
        counts[i + 1] += counts[i];
    }
    let offsets = counts;
    let mut cursor = offsets.clone();
    let mut entries = vec![0u32; offsets[n_tiles]];
    for &i in &order {
        if let Some((tx0, tx1, ty0, ty1)) = ranges[i as usize] {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    let t = ty * tiles_x + tx;
                    entries[cursor[t]] = i;
                    cursor[t] += 1;
                }
            }
        }
    }

    Ok(TileBins { tile_size, tiles_x, tiles_y, width, height, offsets, entries })
}

/// Compact per-splat data for the blend loop.
#[derive(Clone, Copy)]
pub(crate) struct Splat {
    pub u: f64,
    pub v: f64,
    pub ca: f64,
    pub cb: f64,
    pub cc: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub radius: f64,
    /// Exponents below this can never reach `min_alpha`.
    pub power_floor: f64,
}

impl Splat {
    pub(crate) fn new(p: &ProjectedGaussian2D, min_alpha: f64) -> Self {
        let power_floor = if min_alpha > 0.0 { (min_alpha / p.opacity).ln() - 1e-9 } else { f64::NEG_INFINITY };
        Self {
            u: p.mean.x,
            v: p.mean.y,
            ca: p.conic[(0, 0)],
            cb: p.conic[(0, 1)],
            cc: p.conic[(1, 1)],
            opacity: p.opacity,
            color: [p.color.x, p.color.y, p.color.z],
            radius: p.radius,
            power_floor,
        }
    }

    #[inline(always)]
    pub(crate) fn power(&self, dx: f64, dy: f64) -> f64 {
        -0.5 * (self.ca * dx * dx + self.cc * dy * dy) - self.cb * dx * dy
    }

    #[inline(always)]
    pub(crate) fn gaussian(&self, dx: f64, dy: f64) -> f64 {
        let p = self.power(dx, dy);
        if p < self.power_floor {
            0.0
        } else {
            p.min(0.0).exp()
        }
    }
}

/// Incremental evaluation of `exp(power)` over a pixel block. The exponent is
/// quadratic in both pixel coordinates, so successive values along a row differ by
/// a ratio that itself changes by a constant factor, and likewise between rows.
struct RecurrenceState {
    g_row: f64,
    qy: f64,
    qyy: f64,
    rx: f64,
    rxy: f64,
    rxx: f64,
}

type Recurrence = Option<RecurrenceState>;

trait RecurrenceExt {
    fn new(s: &Splat, dx0: f64, dy0: f64, extent: usize) -> Self;
    fn row_start(&self) -> (f64, f64);
    fn next_row(&mut self);
}

impl RecurrenceExt for Recurrence {
    /// `None` when the factors could overflow or underflow; callers then evaluate directly.
    fn new(s: &Splat, dx0: f64, dy0: f64, extent: usize) -> Self {
        let p0 = s.power(dx0, dy0);
        let reach = dx0.abs().max(dy0.abs()) + extent as f64 + 1.0;
        let slope = (s.ca.abs() + s.cc.abs() + 2.0 * s.cb.abs()) * reach;
        if p0 < -200.0 || slope * extent as f64 > 400.0 {
            return None;
        }
        Some(RecurrenceState {
            g_row: p0.min(0.0).exp(),
            qy: (-0.5 * s.cc * (2.0 * dy0 + 1.0) - s.cb * dx0).exp(),
            qyy: (-s.cc).exp(),
            rx: (-0.5 * s.ca * (2.0 * dx0 + 1.0) - s.cb * dy0).exp(),
            rxy: (-s.cb).exp(),
            rxx: (-s.ca).exp(),
        })
    }

    #[inline(always)]
    fn row_start(&self) -> (f64, f64) {
        self.as_ref().map_or((0.0, 0.0), |r| (r.g_row, r.rx))
    }

    #[inline(always)]
    fn next_row(&mut self) {
        if let Some(r) = self {
            r.g_row *= r.qy;
            r.qy *= r.qyy;
            r.rx *= r.rxy;
        }
    }
}

pub(crate) struct TileOutput {
    pub color: Vec<[f64; 3]>,
    pub transmittance: Vec<f64>,
    pub count: Vec<u32>,
}

/// Blends one tile front to back. `visit` sees every accepted contribution as
/// `(local pixel, position in tile list, alpha, exp term, transmittance before)`.
pub(crate) fn blend_tile(
    bins: &TileBins,
    tile: usize,
    splats: &[Splat],
    config: &RenderConfig,
    mut visit: impl FnMut(usize, usize, f64, f64, f64),
) -> TileOutput {
    let (x0, x1, y0, y1) = bins.tile_rect(tile);
    let tw = x1 - x0;
    let n = tw * (y1 - y0);
    let mut color = vec![[0.0f64; 3]; n];
    let mut trans = vec![1.0f64; n];
    let mut count = vec![0u32; n];
    let mut active = n;
    let (min_alpha, cutoff) = (config.min_alpha, config.transmittance_cutoff);
    for (pos, &e) in bins.tile_by_id(tile).iter().enumerate() {
        let s = &splats[e as usize];
        let (Some((px0, px1)), Some((py0, py1))) =
            (pixel_span(s.u, s.radius, bins.width), pixel_span(s.v, s.radius, bins.height))
        else {
            continue;
        };
        let (ax0, ax1) = (px0.max(x0), px1.min(x1 - 1));
        let (ay0, ay1) = (py0.max(y0), py1.min(y1 - 1));
        if ax0 > ax1 || ay0 > ay1 {
            continue;
        }
        let len = ax1 - ax0 + 1;
        let mut rec = Recurrence::new(s, ax0 as f64 - s.u, ay0 as f64 - s.v, len.max(ay1 - ay0 + 1));
        for y in ay0..=ay1 {
            let dy = y as f64 - s.v;
            let base = (y - y0) * tw + (ax0 - x0);
            let span = base..base + len;
            let pixels = trans[span.clone()].iter_mut().zip(&mut color[span.clone()]).zip(&mut count[span]);
            let (mut g_next, mut ratio) = rec.row_start();
            for (j, ((t, c), k)) in pixels.enumerate() {
                let dx = (ax0 + j) as f64 - s.u;
                let g = match rec {
                    Some(ref r) => {
                        let g = g_next;
                        g_next *= ratio;
                        ratio *= r.rxx;
                        g
                    }
                    None => s.gaussian(dx, dy),
                };
                // a pixel whose transmittance fell below the cutoff is finished
                if *t < cutoff {
                    continue;
                }
                let alpha = s.opacity * g;
                if alpha < min_alpha || alpha <= 0.0 {
                    continue;
                }
                visit(base + j, pos, alpha, g, *t);
                let w = alpha * *t;
                c[0] += s.color[0] * w;
                c[1] += s.color[1] * w;
                c[2] += s.color[2] * w;
                *t *= 1.0 - alpha;
                *k += 1;
                if *t < cutoff {
                    active -= 1;
                }
            }
            rec.next_row();
        }
        if active == 0 {
            break;
        }
    }
    TileOutput { color, transmittance: trans, count }
}

pub fn composite(
    projected: &[ProjectedGaussian2D],
    bins: &TileBins,
    config: &RenderConfig,
) -> RenderedFrame {
    let splats: Vec<Splat> = projected.iter().map(|p| Splat::new(p, config.min_alpha)).collect();
    let tiles: Vec<TileOutput> = (0..bins.num_tiles())
        .into_par_iter()
        .map(|t| blend_tile(bins, t, &splats, config, |_, _, _, _, _| {}))
        .collect();
    let (w, h) = (bins.width, bins.height);
    let mut frame = RenderedFrame::background(w, h, config.background);
    let bg = config.background;
    for (t, out) in tiles.iter().enumerate() {
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
    frame
}

pub fn render(gaussians: &[Gaussian3D], camera: &Camera, config: &RenderConfig) -> Result<RenderedFrame> {
    render_timed(gaussians, camera, config).map(|(f, _)| f)
}

/// [`render`] plus a wall-clock breakdown of its three stages.
pub fn render_timed(
    gaussians: &[Gaussian3D],
    camera: &Camera,
    config: &RenderConfig,
) -> Result<(RenderedFrame, RenderTimings)> {
    config.validate()?;
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let t0 = Instant::now();
    let projected = project_all(gaussians, camera, config);
    let t1 = Instant::now();
    let bins = bin_and_sort(&projected, w, h, config.tile_size)?;
    let t2 = Instant::now();
    let frame = composite(&projected, &bins, config);
    let t3 = Instant::now();
    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
    Ok((frame, RenderTimings { ms_project: ms(t0, t1), ms_sort: ms(t1, t2), ms_blend: ms(t2, t3) }))
}
