//! Semantic masked vector-quantization codec for an image and its
//! segmentation map.
//!
//! Both inputs are encoded to a grid of latent vectors. A relevance scorer
//! keeps a fraction of the vectors, which are quantized against a learned
//! codebook and entropy-coded; the decoder fills the discarded positions with
//! a placeholder codeword, de-masks them with constrained attention and
//! reconstructs the segmentation map and the image.

pub mod augmentation;
pub mod bitstream;
pub mod codec;
pub mod coder;
pub mod data;
pub mod eval;
pub mod error;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod networks;
pub mod rate;
pub mod samm;
pub mod semantic_map;
pub mod training;

pub use error::{Error, Result};
