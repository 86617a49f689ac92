//! Weights files (JSON manifest plus little-endian f32 blob) and the few layer
//! types the learned backends execute.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "f32".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Blob path, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::WeightLoad(format!("shape {:?} does not hold {} values", shape, data.len())));
        }
        Ok(Self { shape, data })
    }
}

/// Named tensors loaded from disk. Tensors are concatenated in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Weights {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path)
            .map_err(|e| Error::WeightLoad(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::WeightLoad(format!("bad manifest: {e}")))?;
        let blob_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::WeightLoad(format!("{}: {e}", blob_path.display())))?;
        let mut offset = 0;
        let mut tensors = BTreeMap::new();
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(Error::WeightLoad(format!("{}: unsupported dtype {}", t.name, t.dtype)));
            }
            let n: usize = t.shape.iter().product();
            let end = offset + 4 * n;
            if end > blob.len() {
                return Err(Error::WeightLoad(format!("blob too short for tensor {}", t.name)));
            }
            let data = blob[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            offset = end;
            tensors.insert(t.name.clone(), Tensor { shape: t.shape.clone(), data });
        }
        if offset != blob.len() {
            return Err(Error::WeightLoad(format!("blob has {} trailing bytes", blob.len() - offset)));
        }
        Ok(Self { tensors, meta: manifest.meta })
    }

    /// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_name = manifest_path
            .with_extension("bin")
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::WeightLoad("manifest path has no file name".into()))?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape.clone(), dtype: default_dtype() });
            for &v in &t.data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest { blob: blob_name.clone(), tensors: entries, meta: self.meta.clone() };
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        fs::write(manifest_path.with_file_name(blob_name), blob)?;
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn meta_usize(&self, key: &str) -> Option<usize> {
        self.meta.get(key).and_then(|v| v.as_u64()).map(|v| v as usize)
    }

    /// Tensor `name` with exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name).ok_or_else(|| Error::WeightLoad(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::WeightLoad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape, shape)));
        }
        Ok(t)
    }

    /// Convolution `{prefix}.weight` `[out, in, k, k]` and `{prefix}.bias` `[out]`.
    pub fn conv(&self, prefix: &str, input: usize, output: usize, kernel: usize) -> Result<Conv2d> {
        let w = self.expect(&format!("{prefix}.weight"), &[output, input, kernel, kernel])?;
        let b = self.expect(&format!("{prefix}.bias"), &[output])?;
        Ok(Conv2d { input, output, kernel, weight: w.data.clone(), bias: b.data.clone() })
    }

    /// Like [`Weights::conv`] but infers the output width from the file.
    pub fn conv_any_output(&self, prefix: &str, input: usize, kernel: usize) -> Result<Conv2d> {
        let name = format!("{prefix}.weight");
        let w = self.get(&name).ok_or_else(|| Error::WeightLoad(format!("missing tensor {name}")))?;
        let output = *w.shape.first().ok_or_else(|| Error::WeightLoad(format!("tensor {name} is a scalar")))?;
        self.conv(prefix, input, output, kernel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Odd-sized, stride-1, zero-padded 2D convolution. Weight layout `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// 1×1 identity map.
    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for c in 0..channels {
            weight[c * channels + c] = 1.0;
        }
        Self { input: channels, output: channels, kernel: 1, weight, bias: vec![0.0; channels] }
    }

    pub fn forward(&self, x: &FeatureMap, act: Activation) -> Result<FeatureMap> {
        if x.channels() != self.input {
            return Err(Error::WeightLoad(format!(
                "convolution expects {} input channels, got {}",
                self.input,
                x.channels()
            )));
        }
        let (w, h) = (x.width(), x.height());
        let (k, r) = (self.kernel, (self.kernel / 2) as isize);
        let mut out = FeatureMap::zeros(w, h, self.output);
        out.data_mut().par_chunks_mut(w * self.output).enumerate().for_each(|(y, row)| {
            let mut acc = vec![0.0; self.output];
            for xx in 0..w {
                acc.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = x.pixel(sx as usize, sy as usize);
                        for (o, a) in acc.iter_mut().enumerate() {
                            let base = ((o * self.input) * k + ky) * k + kx;
                            let mut s = 0.0;
                            for (i, &v) in src.iter().enumerate() {
                                s += self.weight[base + i * k * k] * v;
                            }
                            *a += s;
                        }
                    }
                }
                for (dst, &a) in row[xx * self.output..(xx + 1) * self.output].iter_mut().zip(&acc) {
                    *dst = act.apply(a);
                }
            }
        });
        Ok(out)
    }

    /// 1×1 convolution applied to a single feature vector.
    pub fn apply_vec(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.kernel, 1);
        for (o, dst) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.input..(o + 1) * self.input];
            *dst = self.bias[o] + row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Plain matrix `[rows, cols]`, applied as `W x`.
pub fn matrix(weights: &Weights, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
    Ok(weights.expect(name, &[rows, cols])?.data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip_and_shape_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut w = Weights::default();
        w.insert("a.weight", Tensor::new(vec![2, 1, 1, 1], vec![0.5, -2.0]).unwrap());
        w.insert("a.bias", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        w.meta.insert("heads".into(), serde_json::json!(2));
        w.save(&path).unwrap();
        let back = Weights::load(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.meta_usize("heads"), Some(2));
        assert!(back.conv("a", 1, 2, 1).is_ok());
        assert!(matches!(back.conv("a", 3, 2, 1), Err(Error::WeightLoad(_))));
        assert!(matches!(back.conv("b", 1, 2, 1), Err(Error::WeightLoad(_))));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut w = Weights::default();
        w.insert("t", Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        w.save(&path).unwrap();
        fs::write(dir.path().join("w.bin"), [0u8; 8]).unwrap();
        assert!(matches!(Weights::load(&path), Err(Error::WeightLoad(_))));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = FeatureMap::from_vec(3, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let conv = Conv2d { input: 1, output: 1, kernel: 3, weight: vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0], bias: vec![0.5] };
        let y = conv.forward(&x, Activation::None).unwrap();
        // cross-shaped sum with zero padding
        assert_eq!(y.pixel(0, 0), &[1.0 + 2.0 + 4.0 + 0.5]);
        assert_eq!(y.pixel(1, 1), &[5.0 + 4.0 + 6.0 + 2.0 + 0.5]);
        let id = Conv2d::identity(1).forward(&x, Activation::None).unwrap();
        assert_eq!(id, x);
    }
}
