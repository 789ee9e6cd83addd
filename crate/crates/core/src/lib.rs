//! Quality-driven minimal training-set detection for segmenting 3D medical
//! image stacks.
//!
//! The pipeline scores every slice with no-reference quality metrics,
//! picks a small initial training set S₀, trains a deep-supervised U-net++
//! on it, and flags further slices whose level-3 and level-4 predictions
//! disagree (Jaccard below `q0`). The flagged set S_m is then annotated and
//! used to fine-tune the model.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imageops;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod pngio;
pub mod quality;
pub mod rng;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
