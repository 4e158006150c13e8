//! Longitudinal lung-nodule follow-up pipeline.
//!
//! Four stages: nodule detection on each CT, cross-timepoint
//! re-identification, growth quantification (diameter difference and a
//! hierarchical probabilistic U-Net with uncertainty), and malignancy
//! classification, plus the evaluation machinery and a synthetic longitudinal
//! phantom generator that stands in for clinical data at desk scale.
//!
//! The numeric core is generic over the scalar type (see [`num::Scalar`]);
//! the aliases below fix the types the pipeline itself runs on.

pub mod dataset;
pub mod detect;
pub mod error;
pub mod nn;
pub mod num;
pub mod phantom;
pub mod seeding;
pub mod types;
pub mod volume;

pub use error::{Error, Result};
pub use num::Scalar;

/// Scalar type used by the pipeline and CLI.
pub type Real = f32;

/// Volume of pipeline scalar type.
pub type Volume = volume::VolumeGrid<Real>;

/// Patch of pipeline scalar type.
pub type Patch = volume::PatchCube<Real>;
