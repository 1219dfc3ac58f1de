//! Self-correcting prompt-based segmentation.
//!
//! A compact promptable segmentation network predicts a prompt-free coarse
//! mask, an error decoder predicts where that mask is wrong, and the
//! corrected mask is turned into point, box and mask prompts for another
//! pass. At inference the loop repeats until the predicted error count stops
//! falling or the iteration budget runs out.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod refine;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use mask::{BinaryMask, Dims, Image, LogitMap, ProbMask};
pub use model::{ArchConfig, CoSam, TrainingMode};
