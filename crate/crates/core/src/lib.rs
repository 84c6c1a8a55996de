//! Desk-scale laboratory for group-relative policy optimization on masked
//! diffusion language models.
//!
//! The crate implements, side by side, four group-update estimators — plain
//! policy gradient, GRPO with its conditional min-clip, unconditionally
//! clipped GRPO, and the self-normalized StableDRL update — on top of a tiny
//! deterministic autodiff substrate and a toy masked denoiser. Around them sit
//! the pieces needed to study why the noisy-ratio estimators misbehave: a
//! forward corruption process with Monte Carlo likelihood-bound estimators,
//! the dual-stream staircase attention mask for block diffusion, gradient
//! spike diagnostics, tail-envelope checks for the instability lemmas, an
//! adversarial exploding-weight stress protocol, and a reproducible experiment
//! runner with CSV plot-data exports.

pub mod autodiff;
pub mod error;
pub mod rng;

pub use error::{Error, Result};

pub mod diffusion;
pub mod model;
pub mod staircase;
pub mod estimators;
pub mod instability;
pub mod ratios;
pub mod runner;
pub mod verify;
