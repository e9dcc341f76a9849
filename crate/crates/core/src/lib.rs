//! Continual knowledge graph embedding with task-driven token masks.
//!
//! A TransE model is trained over a sequence of growing graph snapshots.
//! Between snapshots a handful of learned tokens summarize which embedding
//! rows matter for the previous task; their masks then weight a
//! distillation term that keeps those rows close to the previous model
//! while the new snapshot is learned.

pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod kg;
pub mod real;
pub mod rng;
pub mod scoring;
pub mod telemetry;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{EvalContext, EvalResult, ForgettingMatrix, Protocol};
pub use kg::{EmbeddingTable, Overlap, SnapshotGraph, SnapshotSequence, Split, Triple, Vocabulary};
pub use real::Real;
pub use telemetry::{RunReport, SnapshotMetrics, SnapshotReport};
pub use tokens::{MaskMatrix, TokenSet};
pub use trainer::{run_continual, run_continual_with, ContinualRun, Mode, ModelState, TrainConfig};
