//! Next-item recommendation from a transformer over recent interactions fused
//! with graph-convolution embeddings of the user–item bipartite graph.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod sequential;
pub mod synthetic;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
