//! Cluster-and-aggregate video pooling built on Gaussian mixture models.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`data`]: video records, the VSEQ file format and seeded synthetic generators.
//! * [`gmm`]: mixture densities, posteriors and EM training of the background model.
//! * [`stats_pool`]: sufficient statistics and the unsupervised SGMM / VLAD / BoW /
//!   average-pooling codes.
//! * [`deep_pool`]: the trainable assignment + aggregation layer (NetVLAD and DSGMM codes)
//!   with analytic gradients.
//! * [`classifier`]: context gating and mixture-of-experts multi-label head.
//! * [`trainer`]: Adam, frame sampling, checkpoints and gradient checking.
//! * [`metrics`]: GAP, Hit@1, ROC AUC and McNemar's test.
//! * [`reco`]: co-watch embeddings, similarity aggregation and GLMix.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod binio;
pub mod classifier;
pub mod data;
pub mod deep_pool;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod reco;
pub mod rng;
pub mod stats_pool;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
