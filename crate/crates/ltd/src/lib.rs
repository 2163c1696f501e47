//! Language-targeted object detection: an end-to-end transformer detector
//! whose decoder is conditioned on natural-language target tokens, plus the
//! data preparation, matching loss, and COCO-style evaluation around it.

pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tensor;
