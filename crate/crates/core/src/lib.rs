//! Core library for building sentiment-analysis distillation datasets and
//! filtering them by difficulty: attribute enumeration and clustering into
//! perspectives, task/instruction/demo generation, instruction-text pairing
//! and teacher response collection, difficulty metrics, and
//! difficulty-prioritized sampling.

pub mod attributes;
pub mod backend;
pub mod clustering;
pub mod corpus;
pub mod difficulty;
pub mod error;
pub mod instructgen;
pub mod jsonl;
pub mod manifest;
pub mod prompts;
pub mod rng;
pub mod sampling;
pub mod types;

pub use error::{Error, Result};
