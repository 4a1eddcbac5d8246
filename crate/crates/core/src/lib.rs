//! FinGAT: hierarchical stock/sector representation learning with graph
//! attention over fully-connected latent-relation graphs, trained with a
//! multi-task ranking + movement objective.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense f64 tensors on a reverse-mode gradient tape
//! - [`data`] — price CSV ingestion, featurization, sliding-window instances,
//!   chronological splits
//! - [`layers`] — GRU cell, temporal attention, graph attention, dense layers
//! - [`model`] — the full hierarchy and its ablation variants
//! - [`train`] — multi-task loss, Adam, the epoch loop, sweeps
//! - [`eval`] — ranking construction, MRR@K / Precision@K / ACC, baselines
//! - [`synth`] — seeded synthetic momentum market for tests and demos
//! - [`ckpt`] — bit-exact parameter checkpoints
//! - [`gradcheck`] — finite-difference verification of every backward rule

pub mod ckpt;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the error contracts of the
/// individual operations (shape, domain, parse, data, config, graph,
/// numeric, training).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {details}")]
    Shape { op: &'static str, details: String },
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("parse error at line {line}: {details}")]
    Parse { line: usize, details: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("eligibility error: {0}")]
    Eligibility(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("numeric error in {layer}: {details}")]
    Numeric { layer: String, details: String },
    #[error("training error: {0}")]
    Train(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (files, schemas, configs)
    /// rather than runtime/numeric failures. CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Data(_) | Error::Config(_) | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
