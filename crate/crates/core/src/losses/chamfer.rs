//! Symmetric Chamfer distance with a uniform-grid nearest-neighbour search.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{invalid, Result};

/// Points per side above which [`chamfer_distance`] subsamples.
pub const CHAMFER_MAX_POINTS: usize = 1 << 16;

/// Uniform bucket grid over a point set.
pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// Cell start offsets into `order`, `dims` product plus one.
    offsets: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = if points.is_empty() { 0.0 } else { (hi - lo).max() };
        let cell = if extent > 0.0 { extent / (points.len() as f64).cbrt().max(1.0) } else { 1.0 };
        let dims = if points.is_empty() {
            [1; 3]
        } else {
            [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1))
        };
        let origin = if points.is_empty() { Vector3::zeros() } else { lo };
        let mut grid = Self { points, origin, cell, dims, offsets: Vec::new(), order: Vec::new() };
        let ncells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; ncells + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i as u32;
            fill[k] += 1;
        }
        grid.offsets = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [isize; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as isize)
    }

    fn flat(&self, c: [isize; 3]) -> usize {
        let c = [0, 1, 2].map(|a| c[a].clamp(0, self.dims[a] as isize - 1) as usize);
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Index of and distance to the nearest point. Ties go to the lowest index.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let qc = self.cell_of(q);
        // distance from q to the grid's bounding box, in cells
        let outside = [0, 1, 2]
            .map(|a| (qc[a].max(0) - qc[a]).max(qc[a] - (self.dims[a] as isize - 1)).max(0))
            .into_iter()
            .max()
            .unwrap();
        let max_ring = outside + self.dims.iter().copied().max().unwrap() as isize;
        let mut best: Option<(usize, f64)> = None;
        let visit = |c: [isize; 3], best: &mut Option<(usize, f64)>| {
            let k = self.flat(c);
            for &i in &self.order[self.offsets[k]..self.offsets[k + 1]] {
                let d = (self.points[i as usize] - q).norm();
                let better = match *best {
                    None => true,
                    Some((bi, bd)) => d < bd || (d == bd && (i as usize) < bi),
                };
                if better {
                    *best = Some((i as usize, d));
                }
            }
        };
        for r in outside..=max_ring {
            let lo = [0, 1, 2].map(|a| (qc[a] - r).max(0));
            let hi = [0, 1, 2].map(|a| (qc[a] + r).min(self.dims[a] as isize - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let ring = (x - qc[0]).abs().max((y - qc[1]).abs()).max((z - qc[2]).abs());
                        if ring == r {
                            visit([x, y, z], &mut best);
                        }
                    }
                }
            }
            // anything in ring r + 1 is at least r cells away
            if let Some((_, d)) = best {
                if d <= r as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }
}

/// Nearest neighbour in `b` of every point of `a`.
pub fn nearest_neighbors(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<Vec<(usize, f64)>> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("Chamfer distance needs two nonempty point sets"));
    }
    let grid = PointGrid::new(b);
    Ok(a.par_iter().map(|p| grid.nearest(p).expect("nonempty")).collect())
}

/// `mean_a min_b |a - b| + mean_b min_a |b - a|`, exact.
pub fn chamfer_exact(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    let ab = nearest_neighbors(a, b)?;
    let ba = nearest_neighbors(b, a)?;
    let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    Ok(mean(&ab) + mean(&ba))
}

/// Every `ceil(n / max)`-th point when there are more than `max`.
pub fn stride_subsample(points: &[Vector3<f64>], max: usize) -> Vec<Vector3<f64>> {
    if points.len() <= max {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(max);
    points.iter().step_by(stride).copied().collect()
}

/// [`chamfer_exact`] on at most [`CHAMFER_MAX_POINTS`] points per side.
pub fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.len() <= CHAMFER_MAX_POINTS && b.len() <= CHAMFER_MAX_POINTS {
        return chamfer_exact(a, b);
    }
    chamfer_exact(&stride_subsample(a, CHAMFER_MAX_POINTS), &stride_subsample(b, CHAMFER_MAX_POINTS))
}

/// Chamfer value and its gradient with respect to every point of both sets.
pub fn chamfer_with_gradient(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
) -> Result<(f64, Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let ab = nearest_neighbors(a, b)?;
    let ba = nearest_neighbors(b, a)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut ga = vec![Vector3::zeros(); a.len()];
    let mut gb = vec![Vector3::zeros(); b.len()];
    let mut value = 0.0;
    for (i, &(j, d)) in ab.iter().enumerate() {
        value += d / na;
        if d > 0.0 {
            let u = (a[i] - b[j]) / (d * na);
            ga[i] += u;
            gb[j] -= u;
        }
    }
    let mut second = 0.0;
    for (j, &(i, d)) in ba.iter().enumerate() {
        second += d / nb;
        if d > 0.0 {
            let u = (b[j] - a[i]) / (d * nb);
            gb[j] += u;
            ga[i] -= u;
        }
    }
    Ok((value + second, ga, gb))
}
