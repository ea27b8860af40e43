//! Minimal one-stage detector standing in for RetinaNet at desk scale:
//! a conv backbone, an FPN-like neck and a shared conv head.

pub mod checkpoint;
mod config;
mod decode;
mod detector;
mod loss;

pub use config::DetectorConfig;
pub use decode::{decode_predictions, nms, DecodeConfig, Detection};
pub use detector::{
    BackboneFeatures, Detector, Input, Layer, NamedLayer, Param, RawPredictions, Scope, Tape,
};
pub use loss::{assign_cell, decode_box, detection_loss, encode_box, focal_term, LossConfig, LossValue};

use crate::error::Result;

/// Builds a detector; see [`Detector::new`].
pub fn build_detector(config: DetectorConfig, seed: u64) -> Result<Detector> {
    Detector::new(config, seed)
}
