//! Structured co-reference graph attention (SCGA) for video-grounded
//! dialogue, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: f64 tensors, a reverse-mode tape, parameters, Adam,
//!   finite-difference checking and checkpoints.
//! * [`encoders`]: vocabulary, sinusoidal positions, text and video encoders.
//! * [`coref`]: discrete history selection and bipartite graph attention.
//! * [`stgraph`]: spatio-temporal edges, n-hop adjacency and GN-GAT.
//! * [`decoder`]: pointer-augmented transformer decoder with greedy and beam
//!   search.
//! * [`model`]: the full pipeline for one dialogue sample.
//! * [`data`]: synthetic dialogue worlds and the dataset file format.
//! * [`training`]: learning-rate schedule, training loop and evaluation.
//! * [`export`]: JSON dumps of attention maps and video graphs.
//! * [`gradsuite`]: finite-difference checks over ops, modules and the loss.

pub mod config;
pub mod coref;
pub mod data;
pub mod decoder;
pub mod encoders;
mod error;
pub mod export;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod rng;
pub mod stgraph;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
