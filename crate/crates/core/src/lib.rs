//! Inpainting-based unsupervised anomaly detection, from the tensors up.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense n-d tensors with reverse-mode automatic differentiation
//!   and [`adam`] for optimization;
//! * [`ops`] — convolution operators (ordinary, partial, gated), batch
//!   normalization with a freezable mode, nearest-neighbor upsampling, pooling
//!   and activations, all differentiable;
//! * [`loss`] — the seven-term inpainting objective (valid/hole L1, perceptual,
//!   two style terms, total variation, Laplacian pyramid) plus the fixed
//!   feature extractor it needs;
//! * [`net`] — the U-Net-like gated-convolution inpainting network and its
//!   two-phase training schedule;
//! * [`phantom`] — irregular hole generation and a deterministic synthetic
//!   phantom dataset (healthy and tumoral slices with ground truth);
//! * [`pipeline`] — the sliding-circle autoinpainting pipeline that detects,
//!   inpaints and segments anomalies as residuals;
//! * [`metrics`] — MSE/PSNR/SSIM, Dice/Precision/Recall, aggregation and the
//!   Wilcoxon signed-rank test;
//! * [`check`] — finite-difference gradient checking utilities (64-bit mode).
//!
//! Everything is deterministic given seeds: generators, initialization,
//! training order and the pipeline are pure functions of their inputs.
//!
//! The crate is `no_std` (with `alloc`); file formats and the CLI live in the
//! companion `autopaint-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod check;
mod error;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{backward, backward_into, Gradients, Scalar, Tensor};
