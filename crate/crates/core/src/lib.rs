pub mod archive;
pub mod blaest;
pub mod cli;
pub mod dca;
pub mod error;
pub mod excitation;
pub mod netmodel;
pub mod solver;
pub mod spectra;

pub use error::{Error, Result};
