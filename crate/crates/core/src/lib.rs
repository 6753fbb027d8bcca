//! Dual-polarization optical fiber transmission laboratory.
//!
//! The crate simulates coherent dual-polarization transmission over a
//! dispersive, nonlinear fiber with distributed polarization-mode dispersion
//! (split-step Fourier method over the Manakov-PMD dynamics), and trains
//! physics-structured receiver models that jointly invert chromatic
//! dispersion, Kerr nonlinearity, and PMD (learned digital backpropagation
//! with per-step differential-group-delay filters and polarization
//! rotations).
//!
//! Module map:
//! - [`signal`]: symbol/waveform containers, pulse shaping, resampling,
//!   matched filtering, genie phase correction, effective SNR.
//! - [`channel`]: fiber parameters, PMD realizations, split-step forward
//!   propagation, amplifier noise, overall Jones transfer and its ideal
//!   inverse, reference (non-learned) digital backpropagation.
//! - [`plan`]: spatial step schedules shared by the channel and the model.
//! - [`model`]: the learned backpropagation model family and its five PMD
//!   parameterizations, tap design, checkpoints, complexity accounting.
//! - [`tape`]: reverse-mode differentiation tailored to the model's operator
//!   set (recorded forward pass, exact parameter gradients).
//! - [`train`]: losses, optimizers, the two-stage training procedures, the
//!   lumped-equalizer baseline, convergence metrics.
//! - [`experiment`]: configuration, profiles, resumable experiment runners,
//!   CSV emission.

pub mod channel;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod model;
pub mod plan;
pub mod rng;
pub mod signal;
pub mod tape;
pub mod train;

pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex64;
