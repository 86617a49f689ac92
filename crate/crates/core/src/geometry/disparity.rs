use crate::error::{invalid, Result};
use crate::grid::{Grid, Mask};

/// Disparities at or below this many pixels are treated as unmatched.
pub const DEFAULT_DISPARITY_EPSILON: f64 = 1e-3;

/// A scalar map with a validity mask. Invalid entries hold 0.0, never NaN or infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedMap {
    pub values: Grid<f64>,
    pub valid: Mask,
    /// Per-pixel match confidence in [0, 1], when the producer has one.
    pub confidence: Option<Grid<f64>>,
}

pub type DepthMap = MaskedMap;
pub type DisparityMap = MaskedMap;

impl MaskedMap {
    pub fn new(values: Grid<f64>, valid: Mask) -> Result<Self> {
        if !values.same_shape(&valid) {
            return Err(invalid("values and mask differ in shape"));
        }
        Ok(Self { values, valid, confidence: None })
    }

    pub fn with_confidence(mut self, confidence: Grid<f64>) -> Result<Self> {
        if !self.values.same_shape(&confidence) {
            return Err(invalid("confidence and values differ in shape"));
        }
        self.confidence = Some(confidence);
        Ok(self)
    }

    /// Every entry valid.
    pub fn dense(values: Grid<f64>) -> Self {
        let valid = Grid::filled(values.width(), values.height(), true);
        Self { values, valid, confidence: None }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if *self.valid.get(x, y) {
            Some(*self.values.get(x, y))
        } else {
            None
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            values: self.values.flip_horizontal(),
            valid: self.valid.flip_horizontal(),
            confidence: self.confidence.as_ref().map(Grid::flip_horizontal),
        }
    }
}

fn check(fx: f64, baseline: f64) -> Result<()> {
    if !(fx > 0.0) {
        return Err(invalid(format!("focal length must be positive, got {fx}")));
    }
    if !(baseline > 0.0) {
        return Err(invalid(format!("baseline must be positive, got {baseline}")));
    }
    Ok(())
}

/// `z = fx * baseline / d`; disparities `<= epsilon` (or already invalid) become invalid.
pub fn disparity_to_depth(d: &DisparityMap, fx: f64, baseline: f64, epsilon: f64) -> Result<DepthMap> {
    check(fx, baseline)?;
    convert(d, |v| if v > epsilon { Some(fx * baseline / v) } else { None })
}

/// Inverse of [`disparity_to_depth`]; non-positive depths become invalid.
pub fn depth_to_disparity(z: &DepthMap, fx: f64, baseline: f64) -> Result<DisparityMap> {
    check(fx, baseline)?;
    convert(z, |v| if v > 0.0 { Some(fx * baseline / v) } else { None })
}

fn convert(src: &MaskedMap, f: impl Fn(f64) -> Option<f64>) -> Result<MaskedMap> {
    let mut values = Grid::filled(src.width(), src.height(), 0.0);
    let mut valid = Grid::filled(src.width(), src.height(), false);
    for (i, (&v, &ok)) in src.values.data().iter().zip(src.valid.data()).enumerate() {
        if let Some(out) = ok.then(|| f(v)).flatten().filter(|o| o.is_finite()) {
            values.data_mut()[i] = out;
            valid.data_mut()[i] = true;
        }
    }
    Ok(MaskedMap { values, valid, confidence: src.confidence.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn analytic_depth() {
        let d = MaskedMap::dense(Grid::filled(2, 2, 50.0));
        let z = disparity_to_depth(&d, 1000.0, 0.1, DEFAULT_DISPARITY_EPSILON).unwrap();
        assert!(z.values.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        let back = depth_to_disparity(&z, 1000.0, 0.1).unwrap();
        assert!(back.values.data().iter().all(|&v| (v - 50.0).abs() < 1e-12));
    }

    #[test]
    fn zero_disparity_is_invalid_not_infinite() {
        let d = MaskedMap::dense(Grid::from_vec(3, 1, vec![0.0, 1e-4, 4.0]).unwrap());
        let z = disparity_to_depth(&d, 1000.0, 0.1, DEFAULT_DISPARITY_EPSILON).unwrap();
        assert_eq!(z.valid.data(), &[false, false, true]);
        assert!(z.values.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_depth_stays_invalid() {
        let z = MaskedMap::new(Grid::filled(2, 1, 2.0), Grid::from_vec(2, 1, vec![true, false]).unwrap()).unwrap();
        let d = depth_to_disparity(&z, 1000.0, 0.1).unwrap();
        assert_eq!(d.valid.data(), &[true, false]);
        assert_eq!(d.values.data()[1], 0.0);
    }

    #[test]
    fn rejects_bad_calibration() {
        let d = MaskedMap::dense(Grid::filled(1, 1, 1.0));
        assert!(disparity_to_depth(&d, 0.0, 0.1, 1e-3).is_err());
        assert!(disparity_to_depth(&d, 10.0, -0.1, 1e-3).is_err());
        assert!(depth_to_disparity(&d, 10.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_random_maps(vals in proptest::collection::vec(0.002f64..500.0, 12), fx in 10.0f64..3000.0, b in 0.01f64..2.0) {
            let d = MaskedMap::dense(Grid::from_vec(4, 3, vals.clone()).unwrap());
            let z = disparity_to_depth(&d, fx, b, DEFAULT_DISPARITY_EPSILON).unwrap();
            let back = depth_to_disparity(&z, fx, b).unwrap();
            for (a, o) in back.values.data().iter().zip(&vals) {
                prop_assert!(((a - o) / o).abs() < 1e-9);
            }
        }
    }
}
