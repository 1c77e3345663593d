//! Desk-scale laboratory for noisy-embedding instruction finetuning.
//!
//! The crate trains a tiny decoder-only transformer language model from
//! scratch, optionally adding scaled random noise to token embeddings during
//! the training forward pass, and ships the analysis toolkit used to study
//! the effect: overlap and diversity text metrics, embedding-geometry
//! probes (nearest-neighbor token flips, similarity-matrix spectra), and a
//! reproducible experiment harness with a CLI front end.

pub mod checkpoint;
pub mod embedlab;
pub mod error;
pub mod generate;
pub mod harness;
pub mod model;
pub mod noise;
pub mod optim;
pub mod tensor;
pub mod textmetrics;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
