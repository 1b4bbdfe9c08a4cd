//! Text-anchored invariant feature learning and multi-bit image watermarking.
//!
//! A trainable projection head over a frozen dual-encoder backbone maps
//! image and caption features into a unit-norm space where clean and
//! distorted views of an image stay close to the caption anchor. Multi-bit
//! watermarks are embedded in that space by pixel-space gradient descent
//! against a secret key and decoded from dot-product signs. Evaluation
//! harnesses benchmark feature invariance and extraction accuracy under
//! parameterized distortions.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod distortion;
pub mod error;
pub mod imageio;
pub mod linalg;
pub mod evaluation;
pub mod extractor;
pub mod losses;
pub mod projector;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod watermark;

pub use error::{Error, Result};
