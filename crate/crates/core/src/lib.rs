//! Pair-Based Joint Encoding (PBJE) for emotion-cause pair extraction.
//!
//! A document is a sequence of clauses; the task is to extract every
//! (emotion clause, cause clause) pair. PBJE co-encodes clause nodes and
//! candidate-pair nodes in one heterogeneous undirected graph and runs
//! relational graph convolutions over it, so information flows between
//! pairs and clauses in both directions instead of clauses-first.
//!
//! The crate is self-contained: dense tensors with a reverse-mode gradient
//! tape ([`numerics`]), corpus handling and a synthetic-corpus generator
//! with a rule-based oracle ([`corpus`]), clause encoders ([`encoder`]),
//! graph construction ([`graph`]), the network itself ([`model`]), a
//! training loop ([`trainer`]) and an evaluation harness ([`eval`]).
//!
//! The numeric layer is generic over the scalar type (any [`numerics::Scalar`],
//! in practice `f32` or `f64`); the pipeline uses the `f64` aliases exported
//! at the crate root — gradient checks against central finite differences
//! want the extra precision and desk-scale corpora make speed a non-issue.

pub mod corpus;
pub mod encoder;
mod error;
pub mod eval;
pub mod fixture;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};

/// Scalar type used by the pipeline.
pub type Real = f64;
/// Dense tensor over [`Real`].
pub type Tensor = numerics::Tensor<Real>;
/// Gradient tape over [`Real`].
pub type Tape = numerics::Tape<Real>;
/// Gradient map over [`Real`].
pub type Gradients = numerics::Gradients<Real>;
/// AdamW optimizer over [`Real`].
pub type AdamW = numerics::AdamW<Real>;
