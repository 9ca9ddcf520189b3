//! Product-of-experts multimodal variational autoencoders.
//!
//! This crate implements a family of bi- and tri-modal VAEs that fuse
//! per-modality encoders into joint posteriors — SVAE (product-of-experts
//! with replacement experts), VAEVAE (dedicated subset encoders), VAEVAE*
//! (VAEVAE networks trained with the SVAE objective) — plus an MMVAE
//! mixture-of-experts baseline trained with an importance-weighted bound.
//! It ships everything needed to run the semi-supervised digit-halves
//! benchmarks end to end: dataset construction (MNIST-Split, MNIST-Split-3,
//! MNIST-SVHN), a deterministic training loop, oracle-classifier coherence
//! metrics, and a small experiment CLI.
//!
//! Start with the runnable examples (`cargo run --release --example
//! poe_fusion_basics`) or the `poe-vae` binary (`poe-vae --help`).

pub mod error;
pub mod gauss;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod nn;
pub mod stub;
pub mod tape;

pub use error::{Error, Result};
