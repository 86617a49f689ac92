//! Dense stereo matching on rectified pairs: feature pyramid, row-wise
//! attention between views, all-pairs correlation, iterative refinement and
//! convex upsampling.

mod attention;
mod features;
mod update;
mod upsample;
mod volume;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use attention::{attention_term, epipolar_attention, EpipolarAttentionWeights};
pub use features::{
    extract_features, ConvEncoder, FeatureExtractor, FeaturePyramid, HANDCRAFTED_CHANNELS, NUM_LEVELS,
};
pub use update::{initial_disparity, iterative_update, CoarseDisparity, ConvGruUpdate, HandcraftedUpdate, UpdateOperator};
pub use upsample::{convex_upsample, Upsampler};
pub use volume::{
    build_cost_volume, lookup_cost, match_confidence, CostVolume, CONFIDENCE_TEMPERATURE, DEFAULT_VOLUME_LEVELS,
};

use crate::error::{invalid, Error, Result};
use crate::geometry::{disparity_to_depth, DepthMap, DisparityMap, MaskedMap, RectifiedPair, DEFAULT_DISPARITY_EPSILON};
use crate::grid::{ColorImage, Grid, Mask};
use crate::nn::Weights;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Handcrafted,
    Weights,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Bilateral,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoConfig {
    pub backend: Backend,
    /// Weights manifest, required by the `weights` backend. Relative paths
    /// resolve against the config file's directory.
    pub weights: Option<PathBuf>,
    pub iterations: usize,
    pub lookup_radius: usize,
    pub heads: usize,
    pub confidence_threshold: f64,
    pub volume_levels: usize,
    pub upsample: UpsampleMode,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Handcrafted,
            weights: None,
            iterations: 8,
            lookup_radius: 4,
            heads: 4,
            confidence_threshold: 0.5,
            volume_levels: DEFAULT_VOLUME_LEVELS,
            upsample: UpsampleMode::Bilateral,
        }
    }
}

impl StereoConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let (Some(w), Some(dir)) = (&cfg.weights, path.parent()) {
            if w.is_relative() {
                cfg.weights = Some(dir.join(w));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(invalid("iterations must be at least 1"));
        }
        if self.lookup_radius < 1 {
            return Err(invalid("lookup_radius must be at least 1"));
        }
        if self.heads < 1 {
            return Err(invalid("heads must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(invalid("confidence_threshold must lie in [0, 1]"));
        }
        if self.volume_levels < 1 {
            return Err(invalid("volume_levels must be at least 1"));
        }
        if self.backend == Backend::Weights && self.weights.is_none() {
            return Err(invalid("the weights backend needs a weights path"));
        }
        Ok(())
    }
}

/// A configured matcher. Immutable and shared by both views.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoModel {
    pub config: StereoConfig,
    pub extractor: FeatureExtractor,
    pub attention: EpipolarAttentionWeights,
    pub update: UpdateOperator,
    pub upsampler: Upsampler,
}

impl Default for StereoModel {
    fn default() -> Self {
        Self::from_config(StereoConfig::default()).expect("default stereo config is valid")
    }
}

impl StereoModel {
    /// The `weights` backend reads the encoder from the manifest; attention,
    /// update and upsampling tensors are used when present, otherwise those
    /// stages fall back to the handcrafted versions.
    pub fn from_config(config: StereoConfig) -> Result<Self> {
        config.validate()?;
        let weights = match (&config.backend, &config.weights) {
            (Backend::Weights, Some(path)) => Some(Weights::load(path)?),
            _ => None,
        };
        Self::assemble(config, weights.as_ref())
    }

    pub fn from_weights(config: StereoConfig, weights: &Weights) -> Result<Self> {
        config.validate()?;
        Self::assemble(config, Some(weights))
    }

    fn assemble(config: StereoConfig, weights: Option<&Weights>) -> Result<Self> {
        let extractor = match weights {
            Some(w) => FeatureExtractor::Weights(ConvEncoder::from_weights(w)?),
            None => FeatureExtractor::Handcrafted,
        };
        let dim = *extractor.channels().last().expect("pyramid has levels");
        let attention = match weights.filter(|w| w.contains_prefix("attention.")) {
            Some(w) => EpipolarAttentionWeights::from_weights(w, dim, config.heads)?,
            None => EpipolarAttentionWeights::passthrough(dim, config.heads)?,
        };
        let update = match weights.filter(|w| w.contains_prefix("update.")) {
            Some(w) => {
                UpdateOperator::ConvGru(ConvGruUpdate::from_weights(w, dim, config.lookup_radius, config.volume_levels)?)
            }
            None => UpdateOperator::Handcrafted(HandcraftedUpdate::new(config.lookup_radius)),
        };
        let upsampler = match weights.filter(|w| w.contains_prefix("upsample.")) {
            Some(w) => Upsampler::from_weights(w, dim, 1 << NUM_LEVELS)?,
            None => match config.upsample {
                UpsampleMode::Bilateral => Upsampler::default(),
                UpsampleMode::Nearest => Upsampler::Nearest,
            },
        };
        Ok(Self { config, extractor, attention, update, upsampler })
    }
}

/// Full-resolution disparity in the rectified-left convention (match at
/// column `u - d`), with the coarse iterates.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityField {
    pub values: Grid<f64>,
    pub valid: Mask,
    pub confidence: Grid<f64>,
    /// `d^1..d^T` at the coarsest feature resolution, in coarse pixels.
    pub trace: Vec<Grid<f64>>,
}

impl DisparityField {
    pub fn to_map(&self) -> DisparityMap {
        let values = Grid::from_vec(
            self.values.width(),
            self.values.height(),
            self.values.data().iter().zip(self.valid.data()).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect(),
        )
        .expect("same shape");
        MaskedMap { values, valid: self.valid.clone(), confidence: Some(self.confidence.clone()) }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            values: self.values.flip_horizontal(),
            valid: self.valid.flip_horizontal(),
            confidence: self.confidence.flip_horizontal(),
            trace: self.trace.iter().map(Grid::flip_horizontal).collect(),
        }
    }
}

/// Disparity of `left` against `right`.
pub fn estimate_disparity(left: &ColorImage, right: &ColorImage, model: &StereoModel) -> Result<DisparityField> {
    if !left.same_shape(right) {
        return Err(invalid("stereo images differ in size"));
    }
    let cfg = &model.config;
    let pl = extract_features(left, &model.extractor)?;
    let pr = extract_features(right, &model.extractor)?;
    let (fl, fr) = epipolar_attention(pl.coarsest(), pr.coarsest(), &model.attention)?;
    let volume = build_cost_volume(&fl, &fr, cfg.volume_levels)?;
    let coarse = iterative_update(&volume, &fl, cfg.iterations, &model.update)?;
    let conf = match_confidence(&volume, &coarse.values, CONFIDENCE_TEMPERATURE)?;
    let factor = 1 << NUM_LEVELS;
    let (values, confidence) = convex_upsample(&coarse.values, Some(&conf), left, &fl, factor, &model.upsampler)?;
    let confidence = confidence.expect("confidence was supplied");
    let w = left.width() as f64;
    let valid = Grid::from_vec(
        left.width(),
        left.height(),
        values
            .data()
            .iter()
            .zip(confidence.data())
            .map(|(&d, &c)| d.is_finite() && c >= cfg.confidence_threshold && d > DEFAULT_DISPARITY_EPSILON && d < w)
            .collect(),
    )?;
    Ok(DisparityField { values, valid, confidence, trace: coarse.trace })
}

/// Disparity of the right view (match at column `u + d` in the left view),
/// computed by running the left-view chain on the mirrored, swapped pair.
pub fn estimate_right_disparity(left: &ColorImage, right: &ColorImage, model: &StereoModel) -> Result<DisparityField> {
    Ok(estimate_disparity(&right.flip_horizontal(), &left.flip_horizontal(), model)?.flip_horizontal())
}

fn restrict(mut field: DisparityField, mask: &Mask) -> DisparityField {
    for (v, &m) in field.valid.data_mut().iter_mut().zip(mask.data()) {
        *v &= m;
    }
    field
}

pub fn estimate_disparity_pair(pair: &RectifiedPair, model: &StereoModel) -> Result<(DisparityField, DisparityField)> {
    let left = estimate_disparity(&pair.left_image, &pair.right_image, model)?;
    let right = estimate_right_disparity(&pair.left_image, &pair.right_image, model)?;
    Ok((restrict(left, &pair.left_valid), restrict(right, &pair.right_valid)))
}

/// Depth maps for both rectified views, carrying validity and confidence.
pub fn estimate_depth_pair(pair: &RectifiedPair, model: &StereoModel) -> Result<(DepthMap, DepthMap)> {
    let (l, r) = estimate_disparity_pair(pair, model)?;
    let fx = pair.intrinsics.fx;
    Ok((
        disparity_to_depth(&l.to_map(), fx, pair.baseline, DEFAULT_DISPARITY_EPSILON)?,
        disparity_to_depth(&r.to_map(), fx, pair.baseline, DEFAULT_DISPARITY_EPSILON)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityMetrics {
    /// Mean absolute end-point error in pixels.
    pub epe: f64,
    /// Fraction of evaluated pixels with error below one pixel.
    pub one_pixel_ratio: f64,
    pub count: usize,
}

/// Errors over pixels where `mask` holds.
pub fn disparity_metrics(estimate: &Grid<f64>, truth: &Grid<f64>, mask: &Mask) -> Result<DisparityMetrics> {
    if !estimate.same_shape(truth) || !estimate.same_shape(mask) {
        return Err(invalid("disparity fields differ in shape"));
    }
    let errors: Vec<f64> = estimate
        .data()
        .iter()
        .zip(truth.data())
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|((e, t), _)| (e - t).abs())
        .collect();
    if errors.is_empty() {
        return Err(Error::InvalidInput("no pixels to evaluate".into()));
    }
    let n = errors.len() as f64;
    Ok(DisparityMetrics {
        epe: errors.iter().sum::<f64>() / n,
        one_pixel_ratio: errors.iter().filter(|&&e| e < 1.0).count() as f64 / n,
        count: errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let cfg: StereoConfig = serde_json::from_str(r#"{"iterations": 3}"#).unwrap();
        assert_eq!(cfg.iterations, 3);
        assert_eq!(cfg.lookup_radius, 4);
        assert!(cfg.validate().is_ok());
        let bad = StereoConfig { backend: Backend::Weights, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = StereoConfig { heads: 5, ..Default::default() };
        assert!(StereoModel::from_config(bad).is_err());
    }

    #[test]
    fn metrics_on_known_errors() {
        let est = Grid::from_vec(4, 1, vec![1.0, 2.5, 3.0, 9.0]).unwrap();
        let truth = Grid::from_vec(4, 1, vec![1.0, 2.0, 5.0, 0.0]).unwrap();
        let mask = Grid::from_vec(4, 1, vec![true, true, true, false]).unwrap();
        let m = disparity_metrics(&est, &truth, &mask).unwrap();
        assert!((m.epe - 2.5 / 3.0).abs() < 1e-12);
        assert!((m.one_pixel_ratio - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.count, 3);
    }

    #[test]
    fn textureless_pair_is_invalid() {
        let img = Grid::filled(64, 32, [0.5, 0.5, 0.5]);
        let d = estimate_disparity(&img, &img, &StereoModel::default()).unwrap();
        assert_eq!(d.valid.count(), 0);
        assert!(d.confidence.data().iter().all(|&c| c < 0.5));
    }
}
