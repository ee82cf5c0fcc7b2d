//! Training-free dense inference for open-vocabulary segmentation with a
//! frozen vision-language encoder.
//!
//! Two branches produce patch-level class logits from the same encoder:
//!
//! * [`og`] gates patch tokens by their norm at selected layers and reads
//!   the result through the projection head.
//! * [`fade`] replaces last-block attention with a feature-affinity proxy,
//!   optionally restricted to instance masks.
//!
//! [`fusion`] aligns, weights and collapses them into a label map, and
//! [`eval`] scores label maps. [`pipeline::Engine`] ties it together for a
//! single image; [`io`] reads the export format.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fade;
pub mod fusion;
pub mod io;
pub mod og;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod vit;

pub use error::{DoucError, Result};
pub use pipeline::{Engine, ImageInput, ImageResult, PipelineConfig};
pub use tensor::{Grid3, Tensor2};
