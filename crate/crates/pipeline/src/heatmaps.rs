//! Opacity, scale and depth visualisations of parameter maps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use splatstereo::geometry::DepthMap;
use splatstereo::grid::{Grid, Mask};
use splatstereo::mapper::GaussianParameterMaps;

use crate::error::Result;

const JET: [(f64, [f64; 3]); 6] = [
    (0.0, [0.0, 0.0, 0.5]),
    (0.125, [0.0, 0.0, 1.0]),
    (0.375, [0.0, 1.0, 1.0]),
    (0.625, [1.0, 1.0, 0.0]),
    (0.875, [1.0, 0.0, 0.0]),
    (1.0, [0.5, 0.0, 0.0]),
];

/// Cold (0) to hot (1) colour ramp. Inputs are clamped to [0, 1].
pub fn jet(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let i = JET.windows(2).position(|w| v <= w[1].0).unwrap_or(JET.len() - 2);
    let ((a, ca), (b, cb)) = (JET[i], JET[i + 1]);
    let t = (v - a) / (b - a);
    [0, 1, 2].map(|k| ((ca[k] + t * (cb[k] - ca[k])) * 255.0).round() as u8)
}

/// Affine map of the masked values onto [0, 1]. A constant map becomes 0.
pub fn normalize(values: &Grid<f64>, mask: &Mask) -> Grid<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, m) in values.data().iter().zip(mask.data()) {
        if *m {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = hi - lo;
    values.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

/// Colour-mapped image of values in [0, 1]; unmasked pixels are black.
pub fn heatmap(values: &Grid<f64>, mask: &Mask) -> RgbImage {
    RgbImage::from_fn(values.width() as u32, values.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb(if *mask.get(x, y) { jet(*values.get(x, y)) } else { [0; 3] })
    })
}

pub fn opacity_heatmap(maps: &GaussianParameterMaps) -> RgbImage {
    heatmap(&maps.opacity, &maps.valid)
}

/// Mean of the three scale axes, normalised over valid pixels.
pub fn scale_heatmap(maps: &GaussianParameterMaps) -> RgbImage {
    let mean = maps.scale.map(|s| (s[0] + s[1] + s[2]) / 3.0);
    heatmap(&normalize(&mean, &maps.valid), &maps.valid)
}

pub fn depth_heatmap(depth: &DepthMap) -> RgbImage {
    heatmap(&normalize(&depth.values, &depth.valid), &depth.valid)
}

/// Writes `<prefix>_opacity.png`, `<prefix>_scale.png` and `<prefix>_depth.png`.
pub fn emit_heatmaps(maps: &GaussianParameterMaps, depth: &DepthMap, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (name, img) in [("opacity", opacity_heatmap(maps)), ("scale", scale_heatmap(maps)), ("depth", depth_heatmap(depth))] {
        let path = dir.join(format!("{prefix}_{name}.png"));
        img.save_with_format(&path, image::ImageFormat::Png)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_clamping() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
        assert_eq!(jet(-3.0), jet(0.0));
        assert_eq!(jet(7.0), jet(1.0));
        assert_eq!(jet(f64::NAN), jet(0.0));
    }

    #[test]
    fn all_opaque_map_is_uniformly_hot() {
        let mut maps = GaussianParameterMaps::empty(6, 4);
        maps.valid = Grid::filled(6, 4, true);
        maps.opacity = Grid::filled(6, 4, 1.0);
        let img = opacity_heatmap(&maps);
        assert!(img.pixels().all(|p| p.0 == jet(1.0)));
    }

    #[test]
    fn checkerboard_gives_two_tones() {
        let mut maps = GaussianParameterMaps::empty(6, 4);
        maps.valid = Grid::filled(6, 4, true);
        maps.opacity = Grid::from_fn(6, 4, |x, y| ((x + y) % 2) as f64);
        let img = opacity_heatmap(&maps);
        let mut tones: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
        tones.sort();
        tones.dedup();
        assert_eq!(tones, {
            let mut t = vec![jet(0.0), jet(1.0)];
            t.sort();
            t
        });
    }

    #[test]
    fn normalization_maps_min_to_zero_and_max_to_one() {
        let v = Grid::from_fn(4, 3, |x, y| 2.0 + x as f64 + 10.0 * y as f64);
        let mask = Grid::from_fn(4, 3, |x, _| x > 0);
        let n = normalize(&v, &mask);
        assert_eq!(*n.get(1, 0), 0.0);
        assert_eq!(*n.get(3, 2), 1.0);
        assert!(normalize(&Grid::filled(3, 3, 5.0), &Grid::filled(3, 3, true)).data().iter().all(|&x| x == 0.0));
        let img = heatmap(&n, &mask);
        assert_eq!(img.get_pixel(0, 1).0, [0, 0, 0]);
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut maps = GaussianParameterMaps::empty(5, 5);
        maps.valid = Grid::filled(5, 5, true);
        let depth = DepthMap::dense(Grid::from_fn(5, 5, |x, _| 1.0 + x as f64));
        let files = emit_heatmaps(&maps, &depth, dir.path(), "left").unwrap();
        assert_eq!(files.len(), 3);
        let d = image::open(&files[2]).unwrap().to_rgb8();
        assert_eq!(d.get_pixel(0, 0).0, jet(0.0));
        assert_eq!(d.get_pixel(4, 0).0, jet(1.0));
    }
}
