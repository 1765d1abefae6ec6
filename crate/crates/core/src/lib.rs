//! Few-shot episode classification on precomputed feature vectors.
//!
//! The pipeline has three stages:
//!
//! 1. **Features** ([`features`]): load class-indexed stores of nonnegative
//!    backbone features (binary or CSV), merge multi-backbone stores by
//!    concatenation, generate synthetic stand-ins, and sample n-way s-shot
//!    episodes deterministically.
//! 2. **Preprocessing** ([`preprocess`]): the PEME chain -- power transform,
//!    Euclidean normalization, mean subtraction against a base- or
//!    novel-dataset center, and a final normalization -- optionally followed
//!    by a Gram-preserving QR reduction of the episode.
//! 3. **Classification**: an inductive nearest-class-mean baseline
//!    ([`classify`]) and the transductive Boosted Min-size Sinkhorn loop
//!    ([`bms`]) built on entropic optimal transport ([`sinkhorn`]).
//!
//! [`classify::evaluate`] drives the Monte-Carlo protocol (N seeded
//! episodes, mean accuracy with a 95% confidence interval) and [`stats`]
//! reproduces the feature-Gaussianity diagnostics (per-class,
//! per-dimension D'Agostino-Pearson tests).
//!
//! Episode evaluation is embarrassingly parallel; with the default
//! `parallel` feature the harness fans episodes out over a rayon pool,
//! and reports are identical whatever the worker count. Disabling the
//! feature leaves a purely sequential build.

#![deny(unsafe_code)]

pub mod bms;
pub mod classify;
pub mod error;
pub mod features;
pub mod preprocess;
pub mod seeding;
pub mod sinkhorn;
pub mod stats;

pub use bms::{run_bms, BmsConfig, BmsMode, WeightMatrix};
pub use classify::{evaluate, ncm_classify, EvalReport, Method, RunSettings};
pub use error::{Error, Result};
pub use features::{
    concat_stores, generate_synthetic_store, load_feature_store, sample_episode,
    write_feature_store, ClassBlock, Episode, EpisodeSpec, FeatureStore, FileFormat, SkewMode,
};
pub use preprocess::{peme, qr_reduce, CenterMode, PreprocessConfig, ProcessedEpisode};
pub use sinkhorn::{
    cost_matrix, min_size_sinkhorn, row_normalize_final, AllocationMatrix, CostMatrix, Marginals,
};
pub use stats::{dagostino_pearson, gaussianity_pass_rate, sample_skewness, StatsTransform};
