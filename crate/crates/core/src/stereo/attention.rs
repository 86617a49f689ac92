use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::FeatureMap;
use crate::nn::{matrix, Activation, Conv2d, Weights};

/// Projection matrices are `dim x dim`, row-major, applied as `W x`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpipolarAttentionWeights {
    pub dim: usize,
    pub heads: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub output: Conv2d,
}

fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

impl EpipolarAttentionWeights {
    /// Identity queries and keys, zero values and identity output: the block
    /// returns its input unchanged.
    pub fn passthrough(dim: usize, heads: usize) -> Result<Self> {
        Self::new(dim, heads, identity(dim), identity(dim), vec![0.0; dim * dim], Conv2d::identity(dim))
    }

    pub fn new(dim: usize, heads: usize, wq: Vec<f64>, wk: Vec<f64>, wv: Vec<f64>, output: Conv2d) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid(format!("feature width {dim} is not divisible by {heads} heads")));
        }
        for (name, m) in [("W_Q", &wq), ("W_K", &wk), ("W_V", &wv)] {
            if m.len() != dim * dim {
                return Err(invalid(format!("{name} has {} entries, expected {}", m.len(), dim * dim)));
            }
        }
        if output.input != dim || output.output != dim || output.kernel != 1 {
            return Err(invalid("attention output convolution must be 1x1 and preserve width"));
        }
        Ok(Self { dim, heads, wq, wk, wv, output })
    }

    /// Tensors `attention.wq`, `attention.wk`, `attention.wv` (`[dim, dim]`) and
    /// `attention.out` (1x1 convolution).
    pub fn from_weights(w: &Weights, dim: usize, heads: usize) -> Result<Self> {
        let heads = w.meta_usize("heads").unwrap_or(heads);
        Self::new(
            dim,
            heads,
            matrix(w, "attention.wq", dim, dim)?,
            matrix(w, "attention.wk", dim, dim)?,
            matrix(w, "attention.wv", dim, dim)?,
            w.conv("attention.out", dim, dim, 1)?,
        )
        .map_err(|e| crate::Error::WeightLoad(e.to_string()))
    }
}

fn project(m: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
    (0..dim).map(|r| m[r * dim..(r + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `Att(query row, key/value row)` for every row: multi-head scaled dot-product
/// attention of each query pixel over all pixels of the other view's same row.
pub fn attention_term(query: &FeatureMap, other: &FeatureMap, weights: &EpipolarAttentionWeights) -> Result<FeatureMap> {
    if !query.same_shape(other) {
        return Err(invalid("attention inputs differ in shape"));
    }
    if query.channels() != weights.dim {
        return Err(invalid(format!("attention expects {} channels, got {}", weights.dim, query.channels())));
    }
    let (w, d, heads) = (query.width(), weights.dim, weights.heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = FeatureMap::zeros(w, query.height(), d);
    out.data_mut().par_chunks_mut(w * d).enumerate().for_each(|(y, row)| {
        let q: Vec<Vec<f64>> = (0..w).map(|x| project(&weights.wq, d, query.pixel(x, y))).collect();
        let k: Vec<Vec<f64>> = (0..w).map(|x| project(&weights.wk, d, other.pixel(x, y))).collect();
        let v: Vec<Vec<f64>> = (0..w).map(|x| project(&weights.wv, d, other.pixel(x, y))).collect();
        let mut scores = vec![0.0; w];
        for x in 0..w {
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                for (kk, s) in scores.iter_mut().enumerate() {
                    *s = q[x][r.clone()].iter().zip(&k[kk][r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let dst = &mut row[x * d + h * dh..x * d + (h + 1) * dh];
                for (kk, &p) in scores.iter().enumerate() {
                    for (o, &vv) in dst.iter_mut().zip(&v[kk][r.clone()]) {
                        *o += p / z * vv;
                    }
                }
            }
        }
    });
    Ok(out)
}

/// `out(f_l + Att(f_l, f_r))` and the mirrored expression for the right view.
pub fn epipolar_attention(
    left: &FeatureMap,
    right: &FeatureMap,
    weights: &EpipolarAttentionWeights,
) -> Result<(FeatureMap, FeatureMap)> {
    let apply = |q: &FeatureMap, kv: &FeatureMap| -> Result<FeatureMap> {
        let mut att = attention_term(q, kv, weights)?;
        for (a, f) in att.data_mut().iter_mut().zip(q.data()) {
            *a += f;
        }
        weights.output.forward(&att, Activation::None)
    };
    Ok((apply(left, right)?, apply(right, left)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(w: usize, h: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::from_vec(w, h, d, (0..w * h * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_weights(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> EpipolarAttentionWeights {
        let mut m = || (0..d * d).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<_>>();
        let (wq, wk, wv) = (m(), m(), m());
        EpipolarAttentionWeights::new(d, heads, wq, wk, wv, Conv2d::identity(d)).unwrap()
    }

    #[test]
    fn zero_values_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, r) = (random_map(6, 3, 8, &mut rng), random_map(6, 3, 8, &mut rng));
        let mut w = random_weights(8, 2, &mut rng);
        w.wv = vec![0.0; 64];
        let (a, b) = epipolar_attention(&l, &r, &w).unwrap();
        assert_eq!(a, l);
        assert_eq!(b, r);
        let (a, _) = epipolar_attention(&l, &r, &EpipolarAttentionWeights::passthrough(8, 4).unwrap()).unwrap();
        assert_eq!(a, l);
    }

    #[test]
    fn attention_term_ignores_column_order_of_other_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l, r) = (random_map(7, 2, 4, &mut rng), random_map(7, 2, 4, &mut rng));
        let w = random_weights(4, 2, &mut rng);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let mut rp = FeatureMap::zeros(7, 2, 4);
        for y in 0..2 {
            for (x, &p) in perm.iter().enumerate() {
                rp.pixel_mut(x, y).copy_from_slice(r.pixel(p, y));
            }
        }
        let a = attention_term(&l, &r, &w).unwrap();
        let b = attention_term(&l, &rp, &w).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_head_matches_hand_computation() {
        // one row, four columns, two channels, identity projections
        let l = FeatureMap::from_vec(4, 1, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, -0.5]).unwrap();
        let r = FeatureMap::from_vec(4, 1, 2, vec![0.0, 1.0, 1.0, 0.0, -1.0, 0.0, 0.5, 0.5]).unwrap();
        let wv = vec![2.0, 0.0, 0.0, 1.0];
        let w = EpipolarAttentionWeights::new(2, 1, identity(2), identity(2), wv, Conv2d::identity(2)).unwrap();
        let att = attention_term(&l, &r, &w).unwrap();
        for x in 0..4 {
            let q = l.pixel(x, 0);
            let s: Vec<f64> = (0..4).map(|k| (q[0] * r.pixel(k, 0)[0] + q[1] * r.pixel(k, 0)[1]) / 2f64.sqrt()).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            let mut want = [0.0; 2];
            for k in 0..4 {
                let p = s[k].exp() / z;
                want[0] += p * 2.0 * r.pixel(k, 0)[0];
                want[1] += p * r.pixel(k, 0)[1];
            }
            assert!((att.pixel(x, 0)[0] - want[0]).abs() < 1e-12);
            assert!((att.pixel(x, 0)[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(EpipolarAttentionWeights::passthrough(6, 4).is_err());
        let w = EpipolarAttentionWeights::passthrough(4, 2).unwrap();
        let a = FeatureMap::zeros(3, 1, 4);
        assert!(attention_term(&a, &FeatureMap::zeros(4, 1, 4), &w).is_err());
        assert!(attention_term(&FeatureMap::zeros(3, 1, 2), &FeatureMap::zeros(3, 1, 2), &w).is_err());
    }
}
