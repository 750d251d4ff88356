//! Harmonic-plus-noise DDSP vocoder.
//!
//! Synthesizes 16 kHz speech from 200 Hz articulatory control features
//! (12-d EMA, F0, loudness). A dilated-convolution encoder emits per-frame
//! control signals for two classical DSP generators — an anti-aliased
//! harmonic oscillator (sine + cosine banks) and an LTV-FIR filtered-noise
//! generator — whose sum passes through a learnable bias-free post
//! convolution filter. Training is end-to-end through a hand-rolled
//! reverse-mode tape, against a multi-scale spectral loss plus an optional
//! multi-resolution LSGAN objective.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod encoder;
mod error;
pub mod loss;
pub mod synth;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
