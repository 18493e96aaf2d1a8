//! Self-supervised acoustic-configuration pre-training for replay spoofing
//! detection.
//!
//! The crate is organised as a pipeline:
//!
//! - [`dsp`]: WAV ingestion and magnitude spectrograms.
//! - [`synthcorpus`]: seeded synthetic corpus with controllable recording
//!   channels plus a replay simulator.
//! - [`pairs`]: same-utterance / different-utterance segment pairs.
//! - [`nn`]: a small dense-tensor CNN engine with exact backward passes.
//! - [`losses`]: cosine pair loss and two-class cross-entropy.
//! - [`optim`]: Adam with bias correction.
//! - [`transfer`]: checkpoints and phase-1 to phase-2 weight transfer.
//! - [`evalkit`]: trial scoring and equal error rate.
//! - [`experiment`]: configuration, training loops and experiment grids.

pub mod dsp;
pub mod evalkit;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pairs;
pub mod seed;
pub mod synthcorpus;
pub mod transfer;
