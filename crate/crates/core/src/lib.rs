//! Twin-discriminating face verification built on a small reverse-mode
//! autograd engine.
//!
//! The model is a ViT backbone whose class token is concatenated with
//! region-level multi-scale features ([`hca`]) and a left/right asymmetry
//! signature ([`faam`]). During training, [`tapwca`] lets anchor queries
//! attend to the anchor's twin inside a configured layer range.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod error;
pub mod faam;
pub mod gradcheck;
pub mod hca;
pub mod heatmap;
pub mod image_io;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tapwca;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod workflow;

pub use autograd::{Graph, Var};
pub use error::{AhanError, Result};
pub use tensor::Tensor;
