//! Attribution-guided segmentation training and failure analysis, built on a
//! small reverse-mode autodiff engine and exercised on synthetic aneurysm
//! phantoms.

pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod fields;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pairnet;
pub mod phantom;
pub mod probe;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
