//! Task heads: segmentation, detection and grading.

pub mod boxes;
pub mod cls;
pub mod det;
pub mod seg;

pub use boxes::{decode_box, encode_box, generate_anchors, iou_3d, match_anchors, nms, Anchor, AnchorLabel};
pub use cls::{ClsDecoder, ClsHeadConfig, ClsInput};
pub use det::{level_geometry, postprocess_detections, DetDecoder, DetOutput, DetectionHeadConfig, Neck};
pub use seg::{SegDecoder, SegHeadConfig};

use autograd::Real;

use crate::encoder::FeaturePyramid;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecoderError {
    #[error("decoder config: {0}")]
    Config(String),
    #[error("pyramid mismatch: {0}")]
    Pyramid(String),
    #[error("box sizes must be positive")]
    NonPositiveSize,
}

fn check_pyramid<T: Real>(pyr: &FeaturePyramid<T>, channels: &[usize; 6]) -> Result<(), DecoderError> {
    if pyr.stages.len() != 6 {
        return Err(DecoderError::Pyramid(format!("expected 6 levels, got {}", pyr.stages.len())));
    }
    let base = &pyr.stages[0].shape()[2..];
    for (i, s) in pyr.stages.iter().enumerate() {
        let sh = s.shape();
        let expect: Vec<usize> = base.iter().map(|&v| v >> i).collect();
        if sh.len() != 5 || sh[1] != channels[i] || sh[2..] != expect[..] {
            return Err(DecoderError::Pyramid(format!(
                "level {i}: expected [N, {}, {:?}], got {sh:?}",
                channels[i], expect
            )));
        }
    }
    Ok(())
}
