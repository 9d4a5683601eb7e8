//! # badexpert
//!
//! A backdoor-defense laboratory for small image classifiers. It trains
//! backdoored models on poisoned synthetic (or IDX) datasets, extracts their
//! backdoor functionality into a "backdoor expert" by finetuning on
//! deliberately mislabeled clean samples, clean-finetunes an auxiliary model,
//! and filters backdoor inputs at inference time by comparing the three
//! models' confidences.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`nn`]: tensors, networks, manual backpropagation, SGD/Adam, training
//! - [`data`]: labeled datasets and the synthetic blob generator
//! - [`idx`]: IDX-format image/label loading
//! - [`poison`]: triggers, poisoning policies, mislabeling strategies
//! - [`extraction`]: backdoor expert extraction and clean finetuning
//! - [`detector`]: decision rules, scoring, threshold calibration
//! - [`metrics`]: CA/ASR (raw and defended), ROC and AUROC
//! - [`adaptive`]: adaptive attacks against the detector
//! - [`harness`]: config-driven end-to-end orchestration used by the CLI

pub mod adaptive;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod extraction;
pub mod harness;
pub mod idx;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod poison;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Tool version stamped into run reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
