//! Cross pseudo supervision for semi-supervised semantic segmentation, built
//! on a small reverse-mode autodiff engine and a synthetic shapes dataset.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod guard;
pub mod losses;
pub mod methods;
pub mod model;
pub mod plot;
pub mod rng;
pub mod rundir;
pub mod tensor;

pub use error::{Error, Result};
