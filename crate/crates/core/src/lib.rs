//! Operator-level batched training engine for knowledge-graph query embeddings.
//!
//! Queries from fourteen logical patterns are compiled into operator DAGs,
//! fused per batch, and executed pool-by-pool so that every operator type runs
//! as one stacked kernel regardless of which query it came from.

pub mod arena;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod kg;
pub mod query;
pub mod sampler;
pub mod kernels;
pub mod scalar;
pub mod scheduler;
pub mod semantic;
pub mod special;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Params32 = kernels::ModelParams<f32>;
pub type Params64 = kernels::ModelParams<f64>;
pub type Store32 = semantic::SemanticStore<f32>;
pub type Store64 = semantic::SemanticStore<f64>;
pub type Trainer32<'g> = trainer::Trainer<'g, f32>;
pub type Trainer64<'g> = trainer::Trainer<'g, f64>;
