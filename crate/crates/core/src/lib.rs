//! Coarse-to-fine dense correspondence matching.
//!
//! The pipeline builds a full 4D correlation tensor from coarse-resolution
//! feature maps, refines it with a learnable neighbourhood-consensus stack
//! and a soft mutual nearest neighbour filter, and uses the refined scores
//! to mask per-query fine-resolution score maps from which pixel matches
//! are retrieved. Training losses, a homography-based accuracy metric, and
//! a synthetic scene generator round out the library; the `dualres` CLI in
//! this workspace drives it all.

pub mod error;
pub mod image;
pub mod reference;
pub mod tensor;

pub mod backbone;
pub mod consensus;
pub mod correlation;
pub mod evaluation;
pub mod matcher;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tensor};

pub use backbone::{DualFeatures, FeatureMap, FusionVariant};
pub use correlation::{CorrTensor4D, ScoreMap2D};
pub use evaluation::{Homography, MmaCurve};
pub use matcher::{Match, MatchSet};
