//! Pinhole cameras, rigs, stereo rectification and disparity/depth conversion.

mod camera;
mod disparity;
mod rectify;
mod rig;

pub use camera::{
    project_point, unproject_pixel, Camera, CameraIntrinsics, CameraPose, PixelDepth, ProjectionMatrix,
};
pub use disparity::{
    depth_to_disparity, disparity_to_depth, DepthMap, DisparityMap, MaskedMap, DEFAULT_DISPARITY_EPSILON,
};
pub use rectify::{rectify_pair, CalibratedView, RectifiedPair};
pub use rig::{select_source_pair, CalibrationEntry, CalibrationFile, CameraRig, RigCamera, SelectionConfig};
