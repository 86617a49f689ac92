pub mod error;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod mapper;
pub mod nn;
pub mod render;
pub mod stereo;
pub mod synthetic;

pub use error::{Error, Result};
