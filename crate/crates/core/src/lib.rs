//! Triple-modality fusion recommender built on a small from-scratch
//! language model.

pub mod adaptors;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod encoders;
mod error;
pub mod eval;
pub mod fusion;
pub mod lm;
pub mod model;
pub mod prompt;
pub mod seed;

pub use error::{Result, TmfError};
