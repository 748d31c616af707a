//! Adversarial attack, adversarial training, and minority-class gradient /
//! representation enhancement for spatiotemporal graph regression under
//! zero-inflated label distributions.
//!
//! The crate is organized around a compact differentiable spatiotemporal
//! graph regressor ([`stmodel`]), l-inf projected-gradient attacks with
//! pluggable victim-node selection ([`attack`]), an attention-based gradient
//! reweighter with a two-stage optimization loop ([`mingre`]), the training
//! objectives ([`losses`]), ranking metrics with majority/minority disparity
//! measures ([`metrics`]), and the training loops ([`trainer`]). Synthetic
//! zero-inflated data generation and the dataset container live in
//! [`zidata`].

pub mod attack;
pub mod autodiff;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mingre;
pub mod params;
pub mod stmodel;
pub mod trainer;
pub mod zidata;

pub use error::{Error, Result};
