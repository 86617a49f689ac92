use rayon::prelude::*;

use super::volume::{lookup_cost, CostVolume};
use crate::error::{invalid, Result};
use crate::grid::{FeatureMap, Grid};
use crate::nn::{Activation, Conv2d, Weights};

/// Robust local search around the current estimate.
///
/// Each step takes the 5x5 median of the rounded field as an anchor `n`,
/// averages the cost taps `C[j - n - m]`, `|m| <= radius`, over the 5x5 window
/// (re-indexed into the centre pixel's frame), fits a parabola to the log of the
/// remapped costs around the best tap and moves a damped step toward its vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct HandcraftedUpdate {
    pub radius: usize,
    pub damping: f64,
    pub window: usize,
}

impl HandcraftedUpdate {
    pub fn new(radius: usize) -> Self {
        Self { radius, damping: 0.7, window: 5 }
    }
}

/// Convolutional GRU over looked-up costs. Tensors `update.context` (context
/// features -> hidden, 3x3), `update.gru.{z,r,q}` (hidden + cost taps + 1 ->
/// hidden, 3x3) and `update.head` (hidden -> 1, 3x3).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGruUpdate {
    pub radius: usize,
    pub context: Conv2d,
    pub z: Conv2d,
    pub r: Conv2d,
    pub q: Conv2d,
    pub head: Conv2d,
}

impl ConvGruUpdate {
    pub fn from_weights(w: &Weights, context_channels: usize, radius: usize, volume_levels: usize) -> Result<Self> {
        let context = w.conv_any_output("update.context", context_channels, 3)?;
        let hidden = context.output;
        let input = hidden + volume_levels * (2 * radius + 1) + 1;
        Ok(Self {
            radius,
            z: w.conv("update.gru.z", input, hidden, 3)?,
            r: w.conv("update.gru.r", input, hidden, 3)?,
            q: w.conv("update.gru.q", input, hidden, 3)?,
            head: w.conv("update.head", hidden, 1, 3)?,
            context,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpdateOperator {
    Handcrafted(HandcraftedUpdate),
    ConvGru(ConvGruUpdate),
}

impl UpdateOperator {
    pub fn radius(&self) -> usize {
        match self {
            UpdateOperator::Handcrafted(u) => u.radius,
            UpdateOperator::ConvGru(u) => u.radius,
        }
    }
}

/// Coarse disparity (in coarse pixels) and the field after every iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseDisparity {
    pub init: Grid<f64>,
    pub values: Grid<f64>,
    pub trace: Vec<Grid<f64>>,
}

/// Per-pixel argmax over non-negative disparities (ties go to the smaller
/// disparity) refined by a parabola through the best cost and its neighbours.
pub fn initial_disparity(volume: &CostVolume) -> Grid<f64> {
    let (w, h) = (volume.width(), volume.height());
    let mut out = Grid::filled(w, h, 0.0);
    out.data_mut().par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        for (j, dst) in row.iter_mut().enumerate() {
            let c = volume.row(i, j);
            let mut best = j;
            for k in (0..j).rev() {
                if c[k] > c[best] {
                    best = k;
                }
            }
            let mut kf = best as f64;
            if best >= 1 && best + 1 < w {
                let (c0, c1, c2) = (c[best - 1], c[best], c[best + 1]);
                let den = c0 - 2.0 * c1 + c2;
                if den < 0.0 {
                    kf += 0.5 * (c0 - c2) / den;
                }
            }
            *dst = (j as f64 - kf).clamp(0.0, (w - 1) as f64);
        }
    });
    out
}

fn median_anchor(d: &Grid<f64>, window: usize) -> Grid<i64> {
    let (w, h) = (d.width(), d.height());
    let r = (window / 2) as isize;
    let rounded = d.map(|v| v.round() as i64);
    let mut out = Grid::filled(w, h, 0i64);
    out.data_mut().par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut buf = Vec::with_capacity(window * window);
        for (x, dst) in row.iter_mut().enumerate() {
            buf.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    buf.push(*rounded.get(sx, sy));
                }
            }
            let mid = buf.len() / 2;
            *dst = *buf.select_nth_unstable(mid).1;
        }
    });
    out
}

#[inline]
fn log_cost(c: f64) -> f64 {
    ((1.0 + c) / 2.0).max(1e-9).ln()
}

fn handcrafted_step(volume: &CostVolume, d: &Grid<f64>, op: &HandcraftedUpdate) -> Grid<f64> {
    let (w, h) = (volume.width(), volume.height());
    let anchor = median_anchor(d, op.window);
    let r = op.radius as i64;
    let taps = 2 * op.radius + 1;
    let half = (op.window / 2) as isize;
    let mut out = Grid::filled(w, h, 0.0);
    out.data_mut().par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut acc = vec![0.0; taps];
        let mut cnt = vec![0u32; taps];
        for (x, dst) in row.iter_mut().enumerate() {
            let n = *anchor.get(x, y);
            acc.iter_mut().for_each(|a| *a = 0.0);
            cnt.iter_mut().for_each(|c| *c = 0);
            for dy in -half..=half {
                let qy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -half..=half {
                    let qx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let nq = *anchor.get(qx, qy);
                    let cost = volume.row(qy, qx);
                    for m in -r..=r {
                        // the neighbour only looked within its own window
                        if (n + m - nq).abs() > r {
                            continue;
                        }
                        let k = (qx as i64 - n - m).clamp(0, w as i64 - 1) as usize;
                        acc[(m + r) as usize] += cost[k];
                        cnt[(m + r) as usize] += 1;
                    }
                }
            }
            for (a, &c) in acc.iter_mut().zip(&cnt) {
                *a /= c.max(1) as f64;
            }
            let current = *d.get(x, y);
            let (lo, hi) = acc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
            if hi - lo < 1e-12 {
                *dst = current;
                continue;
            }
            let best = acc.iter().enumerate().fold(0, |b, (i, &v)| if v > acc[b] { i } else { b });
            let bi = best.clamp(1, taps - 2);
            let (a0, a1, a2) = (log_cost(acc[bi - 1]), log_cost(acc[bi]), log_cost(acc[bi + 1]));
            let den = a0 - 2.0 * a1 + a2;
            let offset = if den < 0.0 { 0.5 * (a0 - a2) / den } else { 0.0 };
            let target = n as f64 + bi as f64 + offset - r as f64;
            *dst = (current + op.damping * (target - current)).clamp(0.0, (w - 1) as f64);
        }
    });
    out
}

fn as_map(g: &Grid<f64>) -> FeatureMap {
    FeatureMap::from_vec(g.width(), g.height(), 1, g.data().to_vec()).expect("shape matches")
}

fn multiply(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    FeatureMap::from_vec(a.width(), a.height(), a.channels(), data).expect("shape matches")
}

/// `d^0` from the volume, then `T` updates; every `d^t` lands in the trace.
pub fn iterative_update(
    volume: &CostVolume,
    context: &FeatureMap,
    iterations: usize,
    operator: &UpdateOperator,
) -> Result<CoarseDisparity> {
    if iterations < 1 {
        return Err(invalid("at least one update iteration is required"));
    }
    if context.width() != volume.width() || context.height() != volume.height() {
        return Err(invalid("context features do not match the cost volume"));
    }
    let init = initial_disparity(volume);
    let mut d = init.clone();
    let mut trace = Vec::with_capacity(iterations);
    let max_d = (volume.width() - 1) as f64;
    match operator {
        UpdateOperator::Handcrafted(op) => {
            for _ in 0..iterations {
                d = handcrafted_step(volume, &d, op);
                trace.push(d.clone());
            }
        }
        UpdateOperator::ConvGru(op) => {
            let mut hidden = op.context.forward(context, Activation::Tanh)?;
            for _ in 0..iterations {
                let cost = lookup_cost(volume, &d, op.radius)?;
                let x = FeatureMap::concat(&[&cost, &as_map(&d)])?;
                let hx = FeatureMap::concat(&[&hidden, &x])?;
                let z = op.z.forward(&hx, Activation::Sigmoid)?;
                let r = op.r.forward(&hx, Activation::Sigmoid)?;
                let q = op.q.forward(&FeatureMap::concat(&[&multiply(&r, &hidden), &x])?, Activation::Tanh)?;
                for ((h, &zz), &qq) in hidden.data_mut().iter_mut().zip(z.data()).zip(q.data()) {
                    *h = (1.0 - zz) * *h + zz * qq;
                }
                let delta = op.head.forward(&hidden, Activation::None)?;
                for (v, &dv) in d.data_mut().iter_mut().zip(delta.data()) {
                    let next = *v + dv;
                    *v = if next.is_finite() { next.clamp(0.0, max_d) } else { *v };
                }
                trace.push(d.clone());
            }
        }
    }
    Ok(CoarseDisparity { init, values: d, trace })
}
