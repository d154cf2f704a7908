//! Small-object detection with a three-scale Tiny-YOLOv3 variant: tensor
//! kernels, darknet cfg and weights handling, inference, box decoding,
//! suppression and detection metrics.

pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod head;
pub mod network;
pub mod postprocess;
pub mod tensor;

pub use error::{Error, Result};
