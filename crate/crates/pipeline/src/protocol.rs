//! Viewer wire format.
//!
//! Client to server: JSON text messages `{"type":"pose", ...}` and
//! `{"type":"ping"}`. Server to client: binary frames made of a 4-byte
//! big-endian header length, a JSON header and the encoded image; errors and
//! pongs are JSON text messages.

use std::io::Cursor;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use splatstereo::geometry::{Camera, CameraIntrinsics, CameraPose};
use splatstereo::grid::ColorImage;

use crate::config::Encoding;
use crate::error::{PipelineError, Result};

/// Largest accepted deviation of `RᵀR` from identity before the rotation is
/// snapped to the nearest orthonormal matrix.
pub const ROTATION_TOL: f64 = 1e-6;

/// A target camera: world-to-camera rotation (row-major), translation,
/// horizontal field of view and output size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Pose {
    pub fn to_camera(&self) -> Result<Camera> {
        if self.width == 0 || self.height == 0 || self.width > 8192 || self.height > 8192 {
            return Err(PipelineError::Request(format!("output size {}x{} out of range", self.width, self.height)));
        }
        let r = Matrix3::from_row_slice(&self.r);
        if !r.iter().all(|v| v.is_finite()) {
            return Err(PipelineError::Request("rotation is not finite".into()));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ROTATION_TOL || r.determinant() <= 0.0 {
            return Err(PipelineError::Request(format!("rotation is not orthonormal (max |RᵀR - I| = {err:e})")));
        }
        let svd = r.svd(true, true);
        let r = svd.u.expect("requested") * svd.v_t.expect("requested");
        let pose = CameraPose::new(r, Vector3::from(self.t))?;
        Ok(Camera::new(CameraIntrinsics::from_fov(self.fov_deg, self.width, self.height)?, pose))
    }

    pub fn from_camera(camera: &Camera) -> Self {
        let rot = camera.pose.rotation();
        let k = &camera.intrinsics;
        Self {
            r: [0, 1, 2].map(|i| [0, 1, 2].map(|j| rot[(i, j)])).concat().try_into().expect("nine entries"),
            t: (*camera.pose.translation()).into(),
            fov_deg: (2.0 * (0.5 * k.width as f64 / k.fx).atan()).to_degrees(),
            width: k.width,
            height: k.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMessage {
    #[serde(flatten)]
    pub pose: Pose,
    pub frame: usize,
    /// Per-request override of the configured encoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<Encoding>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Pose(PoseMessage),
    Ping,
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Protocol(format!("malformed message: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameHeader {
    #[serde(rename = "type")]
    pub kind: String,
    pub frame: usize,
    pub t_src_ms: f64,
    pub t_render_ms: f64,
    pub encoding: Encoding,
    /// Source pair used for the frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<(String, String)>,
    /// Whether the source stage came from the session cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_hit: Option<bool>,
}

impl FrameHeader {
    pub fn new(frame: usize, t_src_ms: f64, t_render_ms: f64, encoding: Encoding) -> Self {
        Self { kind: "frame".into(), frame, t_src_ms, t_render_ms, encoding, pair: None, cache_hit: None }
    }
}

/// JSON text replies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerText {
    Pong,
    Error { message: String },
}

pub fn encode_frame_message(header: &FrameHeader, image: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| PipelineError::Protocol("header too long".into()))?;
    let mut out = Vec::with_capacity(4 + json.len() + image.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(image);
    Ok(out)
}

pub fn decode_frame_message(bytes: &[u8]) -> Result<(FrameHeader, &[u8])> {
    let short = || PipelineError::Protocol("frame message is truncated".into());
    let len = u32::from_be_bytes(bytes.get(..4).ok_or_else(short)?.try_into().expect("four bytes")) as usize;
    let json = bytes.get(4..4 + len).ok_or_else(short)?;
    let header: FrameHeader =
        serde_json::from_slice(json).map_err(|e| PipelineError::Protocol(format!("bad frame header: {e}")))?;
    if header.kind != "frame" {
        return Err(PipelineError::Protocol(format!("unexpected header type {:?}", header.kind)));
    }
    Ok((header, &bytes[4 + len..]))
}

pub fn encode_image(image: &ColorImage, encoding: Encoding, jpeg_quality: u8) -> Result<Vec<u8>> {
    let rgb = image.to_rgb8();
    let mut out = Cursor::new(Vec::new());
    match encoding {
        Encoding::Png => rgb.write_to(&mut out, image::ImageFormat::Png)?,
        Encoding::Jpeg => {
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, jpeg_quality).encode_image(&rgb)?
        }
    }
    Ok(out.into_inner())
}
