//! Desk-scale text image machine translation.
//!
//! The crate pretrains a small OCR encoder-decoder and a small MT
//! encoder-decoder on deterministic synthetic data, freezes both, then trains
//! a modal adapter that maps OCR features into the MT feature space under a
//! joint translation + cross-modal contrastive objective. The harness
//! compares the bridged system against cascade, scratch, fine-tune, and
//! vanilla-adapter baselines on parameter count, decode latency, and
//! translation quality.

pub mod backbones;
pub mod bridge;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tensor;
