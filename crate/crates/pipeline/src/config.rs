//! Pipeline configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use splatstereo::losses::RefineConfig;
use splatstereo::mapper::MapperConfig;
use splatstereo::render::RenderConfig;
use splatstereo::stereo::StereoConfig;

use crate::error::Result;

/// Frame encoding for the live service.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    #[default]
    Jpeg,
    Png,
}

impl Encoding {
    pub fn name(self) -> &'static str {
        match self {
            Encoding::Jpeg => "jpeg",
            Encoding::Png => "png",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stereo: StereoConfig,
    pub mapper: MapperConfig,
    pub render: RenderConfig,
    pub refine: RefineConfig,
    /// World up axis for ordering source pairs. Derived from the rig's
    /// cameras when absent.
    pub up: Option<[f64; 3]>,
    pub encoding: Encoding,
    pub jpeg_quality: u8,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stereo: StereoConfig::default(),
            mapper: MapperConfig::default(),
            render: RenderConfig::default(),
            refine: RefineConfig::default(),
            up: None,
            encoding: Encoding::Jpeg,
            jpeg_quality: 90,
        }
    }
}

impl PipelineConfig {
    /// Relative weight paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            for w in [&mut cfg.stereo.weights, &mut cfg.mapper.weights].into_iter().flatten() {
                if w.is_relative() {
                    *w = dir.join(&*w);
                }
            }
        }
        cfg.stereo.validate()?;
        cfg.render.validate()?;
        Ok(cfg)
    }
}
