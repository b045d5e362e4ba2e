//! Self-supervised speaker verification backend.
//!
//! The crate covers the whole chain at desk scale: synthetic speaker data,
//! a contrastive (momentum-queue) bootstrap of a small embedding extractor,
//! iterative pseudo-labeling by k-means plus agglomerative merging with
//! label exchange between two networks, cosine trial scoring with adaptive
//! ZT-/S-norm, score fusion and detection metrics.

// `!(x > 0.0)` is the idiom for "positive and not NaN" throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod embedops;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{EmbeddingSet, LabelSet, ScoreSet, TrialList, UtteranceId};
