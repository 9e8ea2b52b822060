//! Statistics-driven pre-training for sequential recommendation.
//!
//! Mines directional item co-occurrence and attribute-frequency statistics
//! from interaction sequences, pre-trains a causal self-attention next-item
//! model with four statistics-driven objectives, fine-tunes on next-item
//! prediction, and evaluates with a sampled-candidate ranking protocol.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod evaluator;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod statistics;
pub mod synthgen;
pub mod trainer;
