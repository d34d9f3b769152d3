//! Adversarial data augmentation for speaker verification.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic corpus with
//! additive-noise augmentation ([`corpus`]), log-Mel filterbank features
//! ([`features`]), the speaker/augmentation batch sampler ([`sampler`]), a
//! residual CNN embedding extractor with attentive statistics pooling, a
//! gradient reversal layer and an augmentation discriminator ([`model`]),
//! the AAM-softmax plus adversarial objective ([`losses`]), the training
//! loop for baseline / DA / A-DA systems ([`train`]) and verification
//! scoring, EER and the augmentation-residual probe ([`eval`]).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
