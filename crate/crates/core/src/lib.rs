//! Core library for multimodal Gaussian-splat reconstruction.
//!
//! Everything in this crate is pure in-memory computation: camera geometry,
//! the Gaussian scene representation, a differentiable CPU rasterizer with a
//! hand-derived backward pass, positional-anchored cross-attention fusion of
//! RGB/NIR/text features, spectral vegetation indices, and the joint
//! Gaussian + pose optimizer. File formats, PNG/PLY IO and the command-line
//! front end live in the companion `splatfuse` crate.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std` feature
//! enables multi-threaded row parallelism. Results are bit-identical at any
//! worker count: per-row partial results are always reduced in row order.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod encode;
pub mod field;
pub mod fuse;
pub mod geom;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod raster;
pub mod rng;
pub mod spectra;
pub mod synth;

pub use field::{GaussianField, GaussianPrimitive};
pub use geom::{CameraIntrinsics, Pose};
