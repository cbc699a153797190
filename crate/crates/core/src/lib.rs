//! Multi-system log anomaly detection.
//!
//! The pipeline mines templates from raw log lines ([`logparse`]), groups the
//! resulting template keys into labeled windows ([`dataset`]), embeds each
//! window as a matrix of template vectors ([`embed`]), encodes it with an
//! entmax self-attention encoder ([`encoder`]) and scores it by its energy
//! under a Gaussian mixture fitted in the encoder's code space ([`gmm`]).
//! [`trainer`] optimizes encoder and mixture jointly on normal windows only;
//! [`detect`] and [`eval`] turn energies into verdicts and metrics.

pub mod checkpoint;
pub mod dataset;
pub mod detect;
pub mod embed;
pub mod encoder;
pub mod entmax;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod logparse;
pub mod synthetic;
pub mod tensorcore;
pub mod trainer;

pub use error::{MladError, Result};
