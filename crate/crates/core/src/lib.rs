//! Multi-view compression for feed-forward Gaussian splatting.
//!
//! The crate partitions input views into anchors and supports, fuses support
//! features into anchors with stacked cross/self-attention blocks under an
//! information-bottleneck training objective, predicts pixel-aligned 3D
//! Gaussians from the compressed latent, and evaluates everything on a
//! synthetic novel-view-synthesis testbed with a small software splatter.

pub mod bench;
pub mod compressor;
pub mod diffsplat;
pub mod error;
pub mod geometry;
pub mod numcore;
pub mod objective;
pub mod pipeline;
pub mod scene;
pub mod selection;

pub use error::{Error, Result};
