//! Hateful-meme classification on top of frozen vision-language encoders.

pub mod archive;
pub mod backbone;
pub mod data;
pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod inversion;
pub mod adapters;
pub mod fusion;
pub mod config;
pub mod eval;
pub mod training;
pub mod convert;
