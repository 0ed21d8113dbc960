//! Generative modelling of objects at unknown poses in large images.
//!
//! A Gaussian deep belief network describes a small canonical patch; a latent
//! 2D similarity transform (the *gaze*) couples that patch to a large scene
//! canvas. Inference over the gaze combines a learned two-stream convolutional
//! regressor with Hamiltonian Monte Carlo, and Monte Carlo EM learns the
//! network from scenes whose object locations are unknown.
//!
//! The crate is `no_std` + `alloc`. File formats, dataset loading and the
//! command-line front end live in the `glimpse` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::neg_cmp_op_on_partial_ord
)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod approxnet;
pub mod bench;
pub mod brbm;
pub mod data;
pub mod em;
mod error;
pub mod gdbn;
pub mod geom;
pub mod grbm;
pub mod hmc;
pub mod image;
pub mod infer;
pub mod math;
pub mod matrix;
pub mod rng;
pub mod warp;

pub use error::{Error, Result};
pub use image::{Canvas, PixelCoord};
pub use matrix::Matrix;
pub use warp::{Gaze, Patch, PatchGrid};

/// Hyperparameters shared by every minibatch trainer in the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 10,
            minibatch: 32,
            momentum: 0.5,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.minibatch == 0 {
            return Err(Error::invalid("minibatch must be at least 1"));
        }
        Ok(())
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
