//! Measures how membership-inference vulnerability of individual training
//! samples evolves over training.
//!
//! The library trains populations of small classifiers with per-model
//! membership assignments, scores every pool sample at every checkpoint,
//! estimates per-sample (FPR, TPR) states on the vulnerability plane with a
//! likelihood-ratio attack (or the classic shadow-classifier attack), and
//! computes individual- and population-level dynamics metrics, per-sample
//! hardness metrics, and their correlations.

pub mod attack;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod hardness;
pub mod nn;
pub mod optim;
pub mod plane;
pub mod train;

pub use error::{Error, Result};
