//! Algorithmic core of a desk-scale masked-image-modeling lab for visual
//! scoring (image quality, aesthetics and video quality).
//!
//! Everything here is `no_std` + `alloc`: degradations, color conversions,
//! spectral profiling, manifest curation, patch masking, a small f64
//! reverse-mode autodiff with a three-stage hierarchical masked autoencoder,
//! training loops, correlation metrics and a procedural benchmark generator.
//! File formats, the CLI and everything touching the filesystem live in the
//! `qptlab` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod color;
pub mod curation;
pub mod degrade;
pub mod error;
pub mod image;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod spectrum;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod params;
pub mod autodiff;

pub use error::{Error, Result};
pub use image::{ColorSpace, Image};
