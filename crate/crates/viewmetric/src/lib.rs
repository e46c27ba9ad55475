//! Viewpoint-conditional deep metric learning at desk scale.
//!
//! The library trains a shared-trunk/two-branch embedding network in which
//! pairs observed from the same viewpoint are compared in one feature space
//! and pairs observed from different viewpoints in another. Training joins
//! within-space and cross-space batch-hard triplet constraints with an
//! optional identity classifier; inference routes every query/gallery
//! comparison through the space owning the pair's predicted viewpoint
//! relation. A synthetic latent-factor dataset generator reproduces the
//! confound that motivates the design: raw-feature distances of cross-view
//! positives exceed those of same-view negatives.
//!
//! Modules:
//! - [`data`]: synthetic dataset generation, id-disjoint splits, pair-class
//!   statistics, and the dataset text format.
//! - [`predictor`]: the affine viewpoint classifier, S/D pair relation, and
//!   controlled prediction-error injection.
//! - [`model`]: the embedding network with analytic forward/backward, Adam,
//!   checkpoints, and a finite-difference gradient checker.
//! - [`loss`]: relation partitions, masked distance matrices, batch-hard
//!   mining, the within/cross/classifier loss terms and their gradients.
//! - [`trainer`]: identity-balanced batch sampling, the learning-rate
//!   schedule, and the training loop.
//! - [`eval`]: conditional distances, CMC/mAP, the viewpoint-related rank-1
//!   protocol, and pair-class distance histograms.
//! - [`config`] and [`experiments`]: the flat experiment config, the seed
//!   plan, and the ablation/sweep harnesses behind the CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod predictor;
pub mod trainer;

pub use error::{Error, Result};
