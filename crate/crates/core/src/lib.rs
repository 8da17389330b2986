//! Explanation-free sensitivity evaluation for sparse autoencoder features.

pub mod aggregation;
pub mod annotation;
pub mod backend;
pub mod corpus;
pub mod examples;
pub mod fixture;
pub mod generation;
pub mod linalg;
pub mod markup;
pub mod overlap;
pub mod pipeline;
pub mod prompt;
pub mod sae;
pub mod scoring;
pub mod stats;
pub mod tokenizer;
