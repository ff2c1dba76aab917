//! Probabilistic end-to-end dense stereo matching.
//!
//! A stereo network in the GC-Net family whose 2D and 3D convolution weights
//! are random variables with learned Gaussian posteriors. Repeated stochastic
//! forward passes yield a per-pixel disparity estimate together with an
//! aleatoric / epistemic / combined variance decomposition.
//!
//! The crate is organised around the pipeline:
//!
//! * [`variational`] — convolution primitives with Gaussian weight posteriors
//!   and the KL divergence to the prior,
//! * [`network`] — feature extraction, cost volume, 3D encoder-decoder
//!   regularisation, soft-argmin readout,
//! * [`loss`] — heteroscedastic regression loss plus KL regulariser,
//! * [`inference`] — Monte-Carlo prediction and variance decomposition,
//! * [`data`] — PFM / KITTI disparity I/O and a synthetic stereogram
//!   generator for desk-scale experiments,
//! * [`metrics`] — bad-pixel rates, MAE/RMSE, sparsification curves,
//! * [`train`], [`checkpoint`], [`predict`], [`evaluate`] — the experiment
//!   harness behind the `probstereo` CLI.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod predict;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use tensor::Tensor;
