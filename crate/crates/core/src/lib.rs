//! Reverberation clutter simulation and spatiotemporal clutter filtering for
//! echocardiography-like image sequences.
//!
//! The crate is organised bottom-up:
//!
//! * [`sequence`], [`manifest`] and [`phantom`] hold the data model, the
//!   `STSQ` container, dataset manifests and a deterministic phantom generator.
//! * [`clutter`] builds Gaussian clutter patterns, places near-field and
//!   rib/lung artifacts inside the sector and superimposes them.
//! * [`tensor`] is a small reverse-mode differentiable engine with the
//!   operators the filtering network needs.
//! * [`net`] assembles the attention-gated residual 3D autoencoder, its
//!   losses and the training loop.
//! * [`svd`] is the multi-ensemble SVD baseline and [`metrics`] computes MARE
//!   and 2D/3D SSIM.
//! * [`pipeline`] wires everything into the file-based workflow used by the
//!   command line tool, and [`verify`] holds the self-check suite.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clutter;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod sequence;
pub mod svd;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use sequence::{PhysicalCalibration, SectorGeometry, SectorMask, Sequence};
