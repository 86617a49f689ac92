//! Tile-based software splatting: projection of 3D Gaussians, per-tile depth
//! sorting, front-to-back alpha compositing and the analytic backward pass.

mod backward;
mod gaussian;
mod project;
mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use backward::{render_with_gradients, RenderGradients};
pub use gaussian::{
    build_covariance, normalize_quat, quat_norm, quat_to_matrix, Gaussian3D, GaussianCloud, Quat, SourceTag,
    SourceView, IDENTITY_QUAT,
};
pub use project::{project_gaussian, ProjectedGaussian2D};
pub use raster::{bin_and_sort, composite, project_all, render, render_timed, RenderTimings, RenderedFrame, TileBins};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Added to both diagonal entries of the screen-space covariance (px²).
    pub blur_floor: f64,
    /// Contributions with alpha below this are skipped.
    pub min_alpha: f64,
    /// A pixel stops blending once its transmittance drops below this.
    pub transmittance_cutoff: f64,
    pub background: [f64; 3],
    pub near_plane: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            blur_floor: 0.3,
            min_alpha: 1.0 / 255.0,
            transmittance_cutoff: 1e-4,
            background: [0.0; 3],
            near_plane: 0.01,
        }
    }
}

impl RenderConfig {
    /// No alpha or transmittance cutoffs, so the image is a smooth function of
    /// every attribute. Used for finite-difference checks.
    pub fn smooth() -> Self {
        Self { min_alpha: 0.0, transmittance_cutoff: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 4 {
            return Err(invalid(format!("tile size must be at least 4, got {}", self.tile_size)));
        }
        if !(self.blur_floor > 0.0) {
            return Err(invalid("blur floor must be positive"));
        }
        if !(0.0..1.0).contains(&self.min_alpha) || !(0.0..1.0).contains(&self.transmittance_cutoff) {
            return Err(invalid("alpha and transmittance cutoffs must lie in [0, 1)"));
        }
        if !(self.near_plane > 0.0) {
            return Err(invalid("near plane must be positive"));
        }
        Ok(())
    }
}
