//! ECG-based electrolyte concentration estimation.
//!
//! Preprocessing, a synthetic corpus generator, target codecs, trainable
//! regression/classification/ordinal/Gaussian models, ensemble and Laplace
//! uncertainty, and the evaluation and perturbation protocol.

mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod io;
pub mod models;
pub mod perturb;
pub mod signal;
pub mod synthdata;
pub mod targets;
pub mod uncertainty;

pub use error::{Error, Result};
