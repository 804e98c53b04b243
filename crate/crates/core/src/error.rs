use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AuditError> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped loosely by origin: ingestion (`Io`, `Parse`,
/// `Validation`, `MixedScale`), metric preconditions (the `Degenerate*`,
/// `NoComparablePairs`, `AllSkipped`, `Unlabeled` family), estimation
/// (`Positivity`, `TooManySkips`) and simulation (`Config`, `NoBracket`,
/// `Infeasible`).
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("no such input: {path}")]
    NotFound { path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error{}: {message}", fmt_line(*.line))]
    Validation { line: Option<usize>, message: String },

    #[error("mixed score scales: line {unit_line} holds a 0-1 score ({unit_value}) but line {percent_line} holds a 0-100 score ({percent_value})")]
    MixedScale {
        unit_line: usize,
        unit_value: f64,
        percent_line: usize,
        percent_value: f64,
    },

    #[error("record is missing an oracle label (prompt {prompt_id}, candidate {candidate_id})")]
    Unlabeled {
        prompt_id: String,
        candidate_id: String,
    },

    #[error("{0}")]
    DegenerateVariance(String),

    #[error("{0}")]
    DegenerateDenominator(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("no comparable pairs: {0}")]
    NoComparablePairs(String),

    #[error("Kendall tau-b undefined on every prompt ({skipped} skipped)")]
    AllSkipped { skipped: usize },

    #[error("unknown candidate {candidate_id} for prompt {prompt_id}")]
    UnknownCandidate {
        prompt_id: String,
        candidate_id: String,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("the oracle-best selector needs an outcome model")]
    UnlabeledOracleBest,

    #[error("statistic undefined on {skipped} of {resamples} bootstrap resamples (limit 20%)")]
    TooManySkips { skipped: usize, resamples: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient resamples: {0}")]
    InsufficientSamples(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("target recovery {target} unreachable: recovery at rho = 1 is {at_one}")]
    NoBracket { target: f64, at_one: f64 },

    #[error("infeasible construction: {0}")]
    Infeasible(String),
}

fn fmt_line(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

impl AuditError {
    pub(crate) fn validation(message: impl Into<String>) -> Self {
        AuditError::Validation {
            line: None,
            message: message.into(),
        }
    }

    pub(crate) fn validation_at(line: usize, message: impl Into<String>) -> Self {
        AuditError::Validation {
            line: Some(line),
            message: message.into(),
        }
    }

    /// True when the error was caused by the caller's input rather than by the
    /// library or the environment. The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, AuditError::Io { .. })
    }
}
