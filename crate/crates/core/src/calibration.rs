//! Isotonic score calibration and its effect on audit metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::PointwiseDataset;
use crate::error::{AuditError, Result};
use crate::metrics::ScoreTable;
use crate::report::fmt_num;
use crate::stats::rng_for;

/// A non-decreasing step function: `values[k]` applies on
/// `[breakpoints[k], breakpoints[k + 1])`, flat beyond both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCalibrator {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl MonotoneCalibrator {
    pub fn identity_on(points: &[f64]) -> Self {
        let mut b = points.to_vec();
        b.sort_by(f64::total_cmp);
        b.dedup();
        MonotoneCalibrator {
            values: b.clone(),
            breakpoints: b,
        }
    }

    pub fn evaluate(&self, score: f64) -> f64 {
        let k = self.breakpoints.partition_point(|&b| b <= score);
        self.values[k.saturating_sub(1)]
    }

    /// Fitted value at each input score.
    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.evaluate(s)).collect()
    }
}

/// Least-squares non-decreasing fit by pool-adjacent-violators. Equal scores
/// are pooled first into one point weighted by multiplicity.
pub fn isotonic_fit(scores: &[f64], labels: &[f64]) -> Result<MonotoneCalibrator> {
    if scores.len() != labels.len() {
        return Err(AuditError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.len() < 2 {
        return Err(AuditError::InsufficientData("isotonic fit needs at least 2 points".into()));
    }
    if scores.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(AuditError::validation("non-finite value in isotonic fit"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut xs: Vec<f64> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for &i in &order {
        if xs.last() == Some(&scores[i]) {
            *sums.last_mut().unwrap() += labels[i];
            *weights.last_mut().unwrap() += 1.0;
        } else {
            xs.push(scores[i]);
            sums.push(labels[i]);
            weights.push(1.0);
        }
    }

    // Blocks of (label sum, weight, number of distinct scores).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(xs.len());
    for (s, w) in sums.iter().zip(&weights) {
        blocks.push((*s, *w, 1));
        while blocks.len() > 1 {
            let (s2, w2, n2) = blocks[blocks.len() - 1];
            let (s1, w1, n1) = blocks[blocks.len() - 2];
            if s1 / w1 <= s2 / w2 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s1 + s2, w1 + w2, n1 + n2);
        }
    }
    let mut values = Vec::with_capacity(xs.len());
    for (s, w, n) in blocks {
        values.extend(std::iter::repeat_n(s / w, n));
    }
    Ok(MonotoneCalibrator {
        breakpoints: xs,
        values,
    })
}

/// Fits on every (judge score, oracle label) record of a labeled dataset.
pub fn fit_dataset(ds: &PointwiseDataset) -> Result<MonotoneCalibrator> {
    let t = ScoreTable::from_dataset(ds)?;
    isotonic_fit(t.judge(), t.oracle())
}

/// Seeded random prompt split: `(fit, evaluate)` with `round(frac * n)`
/// prompts in the first part.
pub fn split_prompts(ds: &PointwiseDataset, seed: u64, frac: f64) -> Result<(PointwiseDataset, PointwiseDataset)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(AuditError::Config("split fraction must lie in (0, 1)".into()));
    }
    let n = ds.n_prompts();
    let k = (frac * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(AuditError::InsufficientData("too few prompts to split".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 0));
    let (mut a, mut b) = (idx[..k].to_vec(), idx[k..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((ds.select(&a), ds.select(&b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectMetrics {
    pub global_r: Option<f64>,
    pub within_r: Option<f64>,
    pub p_nt: Option<f64>,
    pub recovery: Option<f64>,
    pub pcs: f64,
    pub judge_tie_rate: f64,
}

impl EffectMetrics {
    pub fn of(t: &ScoreTable) -> Self {
        EffectMetrics {
            global_r: t.global_correlation().ok(),
            within_r: t.residuals().within_correlation().ok(),
            p_nt: t.sign_agreement().ok(),
            recovery: t.recovery().ok(),
            pcs: t.top1_accuracy(),
            judge_tie_rate: t.tie_diagnostics().judge_pairwise_tie_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEffect {
    pub before: EffectMetrics,
    pub after: EffectMetrics,
    pub delta: EffectMetrics,
    pub covariate_note: String,
}

pub const COVARIATE_NOTE: &str = "Covariate calibration (score plus response features) is not evaluated here. \
It can break judge ties, but it can also reorder untied candidates, trading sign agreement for tie-breaking.";

/// Metrics before and after replacing judge scores with calibrated scores.
pub fn calibration_effect(ds: &PointwiseDataset, cal: &MonotoneCalibrator) -> Result<CalibrationEffect> {
    let raw = ScoreTable::from_dataset(ds)?;
    let calibrated = raw.with_judge(cal.apply(raw.judge()))?;
    let before = EffectMetrics::of(&raw);
    let after = EffectMetrics::of(&calibrated);
    let diff = |a: Option<f64>, b: Option<f64>| Some(b? - a?);
    Ok(CalibrationEffect {
        delta: EffectMetrics {
            global_r: diff(before.global_r, after.global_r),
            within_r: diff(before.within_r, after.within_r),
            p_nt: diff(before.p_nt, after.p_nt),
            recovery: diff(before.recovery, after.recovery),
            pcs: after.pcs - before.pcs,
            judge_tie_rate: after.judge_tie_rate - before.judge_tie_rate,
        },
        before,
        after,
        covariate_note: COVARIATE_NOTE.to_string(),
    })
}

impl CalibrationEffect {
    pub fn to_markdown(&self) -> String {
        let f = |v: Option<f64>| v.map(fmt_num).unwrap_or_else(|| "n/a".into());
        let mut out = String::from("## Calibration effect\n\n| Metric | Raw | Calibrated | Change |\n|---|---|---|---|\n");
        type Row<'a> = (&'a str, Option<f64>, Option<f64>, Option<f64>);
        let rows: [Row; 6] = [
            ("Global r", self.before.global_r, self.after.global_r, self.delta.global_r),
            ("Within-prompt r", self.before.within_r, self.after.within_r, self.delta.within_r),
            ("p_nt", self.before.p_nt, self.after.p_nt, self.delta.p_nt),
            ("Recovery", self.before.recovery, self.after.recovery, self.delta.recovery),
            ("Top-1 accuracy", Some(self.before.pcs), Some(self.after.pcs), Some(self.delta.pcs)),
            (
                "Judge pairwise ties",
                Some(self.before.judge_tie_rate),
                Some(self.after.judge_tie_rate),
                Some(self.delta.judge_tie_rate),
            ),
        ];
        for (name, a, b, d) in rows {
            let _ = writeln!(out, "| {name} | {} | {} | {} |", f(a), f(b), f(d));
        }
        let _ = writeln!(out, "\n{}", self.covariate_note);
        out
    }
}
