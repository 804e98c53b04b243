//! Report value types and markdown rendering helpers.

use serde::{Deserialize, Serialize};

use crate::error::AuditError;

/// A reported number: either a value (with an optional 95% interval) or the
/// reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_note: Option<String>,
}

impl Metric {
    pub fn of(value: f64) -> Self {
        Metric {
            value: Some(value),
            ci: None,
            reason: None,
            ci_note: None,
        }
    }

    pub fn absent(reason: impl Into<String>) -> Self {
        Metric {
            value: None,
            ci: None,
            reason: Some(reason.into()),
            ci_note: None,
        }
    }

    pub fn from_result(r: Result<f64, AuditError>) -> Self {
        match r {
            Ok(v) => Metric::of(v),
            Err(e) => Metric::absent(e.to_string()),
        }
    }

    pub fn is_present(&self) -> bool {
        self.value.is_some()
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:.3}")
}

pub(crate) fn fmt_pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// One markdown table row: name | point | CI.
pub(crate) fn metric_row(name: &str, m: &Metric, pct: bool) -> String {
    let f = if pct { fmt_pct } else { fmt_num };
    let point = match (&m.value, &m.reason) {
        (Some(v), _) => f(*v),
        (None, Some(r)) => format!("n/a ({r})"),
        (None, None) => "n/a".to_string(),
    };
    let ci = m
        .ci
        .map(|[lo, hi]| format!("[{}, {}]", f(lo), f(hi)))
        .unwrap_or_else(|| "---".to_string());
    format!("| {name} | {point} | {ci} |\n")
}
