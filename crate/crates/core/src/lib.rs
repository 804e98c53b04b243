//! Decision-validity audits for best-of-n selection with an LLM judge.
//!
//! The judge picks one candidate per prompt; these tools measure how much of
//! the oracle's achievable gain that choice captures, with uncertainty,
//! partial-label estimation, calibration ablations, simulations and oracle
//! routing.

// Negated comparisons are used so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod inference;
pub mod calibration;
pub mod cli;
pub mod metrics;
pub mod pairwise;
pub mod report;
pub mod routing;
pub mod simulation;
pub mod stats;

pub use dataset::{
    CandidateRecord, Choice, Format, PairwiseDataset, PairwiseRecord, PointwiseDataset, PromptGroup,
};
pub use error::{AuditError, Result};
pub use inference::{BootstrapConfig, IntervalEstimate};
pub use metrics::{audit, AuditReport, ScoreTable};
pub use report::Metric;
