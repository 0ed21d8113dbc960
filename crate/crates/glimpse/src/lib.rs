//! File formats, synthetic experiments and the command-line front end.

pub mod agen;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod pairs;
pub mod pnm;
pub mod report;

pub use error::{Error, Result};
