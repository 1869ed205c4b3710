//! A self-contained laboratory for out-of-distribution (OOD) detection.
//!
//! The crate trains and compares six detection methods on a synthetic
//! desk-scale benchmark: a softmax baseline (e1), independent BCE heads (e2),
//! an explicit OOD class (e3), Outlier Exposure (e4), energy scoring and
//! energy fine-tuning (e5a/e5b), and wild-data constrained training via an
//! augmented Lagrangian (e6). Everything runs on a small hand-rolled
//! reverse-mode autodiff engine so gradients can be verified against finite
//! differences.
//!
//! Module map:
//! - [`diffcore`] — tensors, the differentiation graph, gradient checking
//! - [`model`] — MLP feature extractor with interchangeable heads
//! - [`objectives`] — every training loss and the free-energy function
//! - [`almstate`] — augmented Lagrangian state machine for e6
//! - [`scoring`] — test-time OOD scores (MSP, sigmoid, OOD class, energy, k-NN)
//! - [`metrics`] — balanced accuracy, ROC/AUROC, FPR95, Wasserstein-1
//! - [`data`] — synthetic benchmark generation, splits, samplers, CSV I/O
//! - [`runner`] — experiment orchestration, reports, and the CLI

pub mod almstate;
pub mod data;
pub mod diffcore;
mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod runner;
pub mod scoring;

pub use error::{Error, Result};
