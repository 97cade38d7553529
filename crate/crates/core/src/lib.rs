//! Stock movement classification from daily prices and tweet embeddings.
//!
//! The crate covers the whole pipeline: StockNet-format ingestion and
//! labeling ([`dataset`]), a per-day embedding cache ([`embeddings`]), a small
//! reverse-mode autodiff engine ([`tensor`], [`nn`]), three classifier
//! families ([`models`]), training with early stopping ([`training`]),
//! accuracy/MCC scoring ([`evaluation`]) and grid search ([`experiments`]).

mod binfmt;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod models;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
