//! Retrieval-guided dialogue response generation through response skeletons.
//!
//! A retrieved `(query, response)` pair is turned into a skeleton by masking
//! tokens of the retrieved response that do not fit the new query; a second
//! model then writes the final response from the query and the skeleton.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod layers;
pub mod model;
pub mod respgen;
pub mod skelgen;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::ModelError;
