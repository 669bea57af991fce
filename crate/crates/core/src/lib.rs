//! Lead-sheet to full-band accompaniment arrangement.
//!
//! The crate is organised bottom-up:
//!
//! * [`score`] holds the symbolic score model, MIDI I/O and 2-bar clip grids.
//! * [`features`] computes track functions, per-bar descriptors and chord labels.
//! * [`metrics`] is the objective evaluation suite (faithfulness, creativity,
//!   chord accuracy, groove consistency).
//! * [`vq`], [`codec`] and [`prior`] are the learned models: EMA codebooks, the
//!   function codec that orchestrates a 2-bar clip, and the autoregressive
//!   prior over per-track function codes with factorized track/time attention.
//! * [`planner`] builds a piano sketch from a phrase database with Viterbi
//!   retrieval and rule-based re-harmonization.
//! * [`pipeline`] wires everything into `orchestrate` / `arrange`.
//!
//! [`nn`] is a small reverse-mode autodiff engine over `f64` matrices that the
//! learned models are written against.

pub mod codec;
pub mod container;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod prior;
pub mod score;
pub mod toy;
pub mod vq;

pub use error::{Error, Result};
