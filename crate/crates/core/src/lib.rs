//! Cover song identification by fusing beat-synchronous MFCC, MFCC
//! self-similarity and HPCP block features.
//!
//! The pipeline runs per song pair:
//!
//! 1. [`features`]: frame-level MFCC and HPCP plus beat tracks at three tempo biases.
//! 2. [`blocks`]: beat-synchronous, normalized block features per channel.
//! 3. [`csm`]: cross-similarity matrices and their mutual-kNN binarization.
//! 4. [`snf`]: similarity network fusion, either on a pair's parent
//!    self-similarity matrices (early) or on corpus score networks (late).
//! 5. [`align`]: diagonally constrained Smith-Waterman on binary CSMs.
//!
//! [`pipeline`] ties these together into corpus extraction, scoring, ranking
//! and evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod audio;
pub mod blocks;
pub mod csm;
pub mod error;
pub mod features;
pub mod pipeline;
pub mod snf;
pub mod synth;

pub use error::{Error, Result};
