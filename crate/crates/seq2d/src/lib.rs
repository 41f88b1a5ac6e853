//! Files, training driver and command line around [`seq2d_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod formats;
pub mod run;

pub use error::{Error, Result};
