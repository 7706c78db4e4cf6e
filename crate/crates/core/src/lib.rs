//! Weakly supervised whole-slide classification of fetal inflammatory
//! response with gated attention multiple-instance learning.
//!
//! The pipeline runs tiling ([`tiler`]) → bag files ([`bagstore`]) → the
//! attention network ([`milnet`]) trained by population-based search
//! ([`pbt`], [`optim`]) → AUROC-weighted ensembles ([`ensemble`]) →
//! attention heatmaps ([`heatmap`]). [`embanalysis`] covers the embedding
//! quality checks (PCA, k-means, KNN, t-SNE) and [`metrics`] the scores
//! everything is judged by.

pub mod bagstore;
pub mod embanalysis;
pub mod ensemble;
pub mod error;
pub mod heatmap;
pub mod linalg;
pub mod metrics;
pub mod milnet;
pub mod optim;
pub mod pbt;
pub mod tiler;

pub use error::{Error, Result};
