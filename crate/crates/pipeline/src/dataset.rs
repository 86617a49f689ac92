//! Multi-view frame datasets.
//!
//! On-disk layout:
//!
//! ```text
//! root/calibration.json
//! root/frames/<frame>/<camera id>.png
//! root/depth/<frame>/<camera id>.png    optional, 16-bit millimetres, 0 = unknown
//! root/masks/<frame>/<camera id>.png    optional foreground masks
//! ```
//!
//! `<frame>` is a decimal number; frames are ordered by it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use splatstereo::geometry::{CameraRig, DepthMap};
use splatstereo::grid::{ColorImage, Grid, Mask};

use crate::error::{PipelineError, Result};

pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Arc<ColorImage>),
}

#[derive(Clone, Debug)]
pub struct FrameEntry {
    pub index: usize,
    pub images: BTreeMap<String, ImageSource>,
    pub depth: BTreeMap<String, PathBuf>,
    pub masks: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub root: Option<PathBuf>,
    pub rig: CameraRig,
    /// Sorted by index.
    pub frames: Vec<FrameEntry>,
}

fn frame_dirs(dir: &Path) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
        let index: usize = name
            .parse()
            .map_err(|_| PipelineError::Dataset(format!("frame directory {name:?} is not a frame number")))?;
        if out.insert(index, path).is_some() {
            return Err(PipelineError::Dataset(format!("frame {index} appears twice")));
        }
    }
    Ok(out)
}

fn optional_files(root: &Path, kind: &str, index: usize, rig: &CameraRig) -> BTreeMap<String, PathBuf> {
    rig.cameras()
        .iter()
        .filter_map(|c| {
            let p = root.join(kind).join(index.to_string()).join(format!("{}.png", c.id));
            let padded = root.join(kind).join(format!("{index:04}")).join(format!("{}.png", c.id));
            [p, padded].into_iter().find(|p| p.is_file()).map(|p| (c.id.clone(), p))
        })
        .collect()
}

/// Reads and validates a dataset directory.
pub fn load_dataset(root: &Path) -> Result<SceneDataset> {
    let calib = root.join(CALIBRATION_FILE);
    if !calib.is_file() {
        return Err(PipelineError::Dataset(format!("missing {}", calib.display())));
    }
    let rig = CameraRig::load_json(&calib)?;
    let frames_dir = root.join("frames");
    if !frames_dir.is_dir() {
        return Err(PipelineError::Dataset(format!("missing {}", frames_dir.display())));
    }
    let mut frames = Vec::new();
    for (index, dir) in frame_dirs(&frames_dir)? {
        let mut images = BTreeMap::new();
        for cam in rig.cameras() {
            let path = dir.join(format!("{}.png", cam.id));
            if !path.is_file() {
                return Err(PipelineError::FrameImage {
                    frame: index,
                    camera: cam.id.clone(),
                    reason: format!("missing image {}", path.display()),
                });
            }
            let (w, h) = image::image_dimensions(&path).map_err(|e| PipelineError::FrameImage {
                frame: index,
                camera: cam.id.clone(),
                reason: e.to_string(),
            })?;
            let k = &cam.camera.intrinsics;
            if (w as usize, h as usize) != (k.width, k.height) {
                return Err(PipelineError::FrameImage {
                    frame: index,
                    camera: cam.id.clone(),
                    reason: format!("image is {w}x{h} but calibration says {}x{}", k.width, k.height),
                });
            }
            images.insert(cam.id.clone(), ImageSource::File(path));
        }
        let depth = optional_files(root, "depth", index, &rig);
        let masks = optional_files(root, "masks", index, &rig);
        frames.push(FrameEntry { index, images, depth, masks });
    }
    if frames.is_empty() {
        return Err(PipelineError::Dataset(format!("no frames under {}", frames_dir.display())));
    }
    Ok(SceneDataset { root: Some(root.to_path_buf()), rig, frames })
}

impl SceneDataset {
    /// A dataset held in memory, one map of camera id to image per frame.
    pub fn from_images(rig: CameraRig, frames: Vec<BTreeMap<String, ColorImage>>) -> Result<Self> {
        let mut out = Vec::with_capacity(frames.len());
        for (index, mut imgs) in frames.into_iter().enumerate() {
            let mut images = BTreeMap::new();
            for cam in rig.cameras() {
                let img = imgs.remove(&cam.id).ok_or_else(|| PipelineError::FrameImage {
                    frame: index,
                    camera: cam.id.clone(),
                    reason: "missing image".into(),
                })?;
                let k = &cam.camera.intrinsics;
                if (img.width(), img.height()) != (k.width, k.height) {
                    return Err(PipelineError::FrameImage {
                        frame: index,
                        camera: cam.id.clone(),
                        reason: format!(
                            "image is {}x{} but calibration says {}x{}",
                            img.width(),
                            img.height(),
                            k.width,
                            k.height
                        ),
                    });
                }
                images.insert(cam.id.clone(), ImageSource::Memory(Arc::new(img)));
            }
            out.push(FrameEntry { index, images, depth: BTreeMap::new(), masks: BTreeMap::new() });
        }
        if out.is_empty() {
            return Err(PipelineError::Dataset("no frames".into()));
        }
        Ok(Self { root: None, rig, frames: out })
    }

    pub fn frame(&self, index: usize) -> Result<&FrameEntry> {
        self.frames
            .binary_search_by_key(&index, |f| f.index)
            .map(|i| &self.frames[i])
            .map_err(|_| PipelineError::Request(format!("no frame {index} in the dataset")))
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.index).collect()
    }

    pub fn image(&self, frame: usize, camera: &str) -> Result<ColorImage> {
        let entry = self.frame(frame)?;
        let source = entry.images.get(camera).ok_or_else(|| PipelineError::FrameImage {
            frame,
            camera: camera.into(),
            reason: "no such camera".into(),
        })?;
        match source {
            ImageSource::Memory(img) => Ok((**img).clone()),
            ImageSource::File(path) => ColorImage::load_png(path).map_err(|e| PipelineError::FrameImage {
                frame,
                camera: camera.into(),
                reason: e.to_string(),
            }),
        }
    }

    pub fn mask(&self, frame: usize, camera: &str) -> Result<Option<Mask>> {
        match self.frame(frame)?.masks.get(camera) {
            Some(p) => Ok(Some(Mask::load_png(p)?)),
            None => Ok(None),
        }
    }

    /// Ground-truth depth in metres, if the dataset has it.
    pub fn depth(&self, frame: usize, camera: &str) -> Result<Option<DepthMap>> {
        let Some(path) = self.frame(frame)?.depth.get(camera) else { return Ok(None) };
        let img = image::open(path)?.to_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values = Grid::from_fn(w, h, |x, y| img.get_pixel(x as u32, y as u32)[0] as f64 / 1000.0);
        let valid = values.map(|&z| z > 0.0);
        Ok(Some(DepthMap::new(values, valid)?))
    }

    /// Writes the calibration and every frame image under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join(CALIBRATION_FILE), self.rig.to_json()?)?;
        for f in &self.frames {
            let dir = root.join("frames").join(format!("{:04}", f.index));
            std::fs::create_dir_all(&dir)?;
            for id in f.images.keys() {
                self.image(f.index, id)?.save_png(&dir.join(format!("{id}.png")))?;
            }
        }
        Ok(())
    }
}
