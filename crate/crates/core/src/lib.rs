//! Retrieval post-processing over precomputed embeddings.
//!
//! The crate is `no_std` + `alloc`. Everything here is a pure function over
//! in-memory matrices; file formats, configuration and the command line live
//! in the `rerank` companion crate.
//!
//! Stage overview:
//!
//! * [`matrix`]: [`FeatureMatrix`], [`NeighborTable`], [`SparseRowMatrix`] and L2 normalization.
//! * [`metricspace`]: exact blocked similarity and kNN search.
//! * [`aggregate`]: TTA view averaging, model ensembling, PCA, DBA and AQE.
//! * [`kreciprocal`]: k-reciprocal encoding and the Jaccard/Euclidean distance matrix `D`.
//! * [`diffusion`]: mutual-kNN affinity graph and truncated diffusion producing `S`.
//! * [`fusion`]: `S - lambda * D` fusion and top-K ranking.
//! * [`eval`]: AP@K / mAP@K.
//! * [`losses`]: ArcFace, Circle, their weighted sum, and the distillation loss.
//!
//! With the `parallel` feature, row-independent work is spread over the
//! current rayon pool. Per-row arithmetic order never depends on the pool
//! size, so results are bitwise identical for any worker count.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod aggregate;
pub mod diffusion;
mod error;
pub mod eval;
pub mod fusion;
pub mod kreciprocal;
pub mod linalg;
pub mod losses;
pub mod math;
pub mod matrix;
pub mod metricspace;
mod par;

pub use error::{Error, Result};
pub use matrix::{FeatureMatrix, LabelMap, NeighborTable, SparseRowMatrix};
