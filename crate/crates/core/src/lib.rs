//! Image disguising for outsourced learning: block-wise randomized
//! multiplicative transforms, block-wise AES, a mixup baseline, the attacks
//! used to probe them and the measurements reported on top.

pub mod aes_disguise;
pub mod attacks;
pub mod blocks;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod image;
pub mod instahide;
pub mod keyfile;
pub mod labels;
pub mod metrics;
pub mod rmt;
pub mod rng;

pub use error::{Error, Result};
pub use image::Image;
pub use keyfile::KeyMaterial;
