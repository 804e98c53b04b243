//! Best-of-2 audits of explicit pairwise judgments, Borda aggregation of
//! partial edge sets, and stated-probability calibration tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Choice, PairwiseDataset, PairwiseRecord, PointwiseDataset};
use crate::error::{AuditError, Result};
use crate::metrics::{prompt_average, judge_pick_value, SelectionValues};
use crate::report::{fmt_num, fmt_pct};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseStats {
    /// Judge TIE rate over all records.
    pub tie_rate: f64,
    /// Agreement over records where neither side tied; absent if none.
    pub agreement: Option<f64>,
    pub p_eff: f64,
    pub recovery_bo2: f64,
    pub n_records: usize,
    pub n_oracle_decided: usize,
    pub n_both_decided: usize,
}

/// One record per within-prompt unordered pair, choices from score signs.
pub fn preferences_from_pointwise(ds: &PointwiseDataset) -> Result<PairwiseDataset> {
    ds.require_labeled()?;
    let mut records = Vec::new();
    for g in ds.groups() {
        let c = &g.candidates;
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                records.push(PairwiseRecord {
                    prompt_id: g.prompt_id.clone(),
                    candidate_a: c[i].candidate_id.clone(),
                    candidate_b: c[j].candidate_id.clone(),
                    judge_choice: Choice::from_scores(c[i].judge_score, c[j].judge_score),
                    oracle_choice: Choice::from_scores(
                        c[i].oracle_label.expect("labeled"),
                        c[j].oracle_label.expect("labeled"),
                    ),
                    confidence: None,
                    stated_prob_a: None,
                });
            }
        }
    }
    PairwiseDataset::new(records)
}

/// Best-of-2 statistics. Records with an oracle TIE carry no decision stake
/// and are excluded from p_eff and recovery; per decided record the judge's
/// value is 1, 0 or 1/2 against 1 for the oracle and 1/2 for random.
pub fn pairwise_stats(pw: &PairwiseDataset) -> Result<PairwiseStats> {
    let n = pw.len();
    let (mut ties, mut agree, mut disagree, mut judge_tied_decided) = (0usize, 0usize, 0usize, 0usize);
    for r in pw.records() {
        if r.judge_choice.is_tie() {
            ties += 1;
        }
        if r.oracle_choice.is_tie() {
            continue;
        }
        match r.judge_choice {
            Choice::Tie => judge_tied_decided += 1,
            c if c == r.oracle_choice => agree += 1,
            _ => disagree += 1,
        }
    }
    let decided = agree + disagree + judge_tied_decided;
    if decided == 0 {
        return Err(AuditError::NoComparablePairs(
            "every record has an oracle TIE".into(),
        ));
    }
    let p_eff = (agree as f64 + 0.5 * judge_tied_decided as f64) / decided as f64;
    let (v_oracle, v_random) = (1.0, 0.5);
    let v_judge = p_eff;
    Ok(PairwiseStats {
        tie_rate: ties as f64 / n as f64,
        agreement: (agree + disagree > 0).then(|| agree as f64 / (agree + disagree) as f64),
        p_eff,
        recovery_bo2: (v_judge - v_random) / (v_oracle - v_random),
        n_records: n,
        n_oracle_decided: decided,
        n_both_decided: agree + disagree,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BordaResult {
    pub candidates: Vec<String>,
    /// Wins plus half ties over incident edges, aligned with `candidates`.
    pub scores: Vec<f64>,
    /// Indices into `candidates` attaining the maximum score.
    pub selected: Vec<usize>,
}

/// Borda scores from judge choices on one prompt's edges.
pub fn borda_select<'a>(
    edges: impl IntoIterator<Item = &'a PairwiseRecord>,
    candidates: &[String],
) -> Result<BordaResult> {
    let index: HashMap<&str, usize> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut scores = vec![0.0; candidates.len()];
    for e in edges {
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| AuditError::UnknownCandidate {
                prompt_id: e.prompt_id.clone(),
                candidate_id: id.to_string(),
            })
        };
        let (a, b) = (lookup(&e.candidate_a)?, lookup(&e.candidate_b)?);
        match e.judge_choice {
            Choice::A => scores[a] += 1.0,
            Choice::B => scores[b] += 1.0,
            Choice::Tie => {
                scores[a] += 0.5;
                scores[b] += 0.5;
            }
        }
    }
    Ok(BordaResult {
        candidates: candidates.to_vec(),
        selected: stats::argmax_set(&scores),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BordaSelection {
    pub values: SelectionValues,
    pub recovery: Option<f64>,
    pub pcs: f64,
    /// Fraction of prompts with at least one edge.
    pub edge_coverage: f64,
    pub n_edges: usize,
}

/// Best-of-k selection by Borda over the supplied edges, residual ties
/// broken in expectation.
pub fn bestofk_with_borda(ds: &PointwiseDataset, edges: &PairwiseDataset) -> Result<BordaSelection> {
    ds.require_labeled()?;
    let mut by_prompt: HashMap<&str, Vec<&PairwiseRecord>> = HashMap::new();
    for e in edges.records() {
        by_prompt.entry(e.prompt_id.as_str()).or_default().push(e);
    }
    if let Some(e) = edges
        .records()
        .iter()
        .find(|e| !ds.groups().iter().any(|g| g.prompt_id == e.prompt_id))
    {
        return Err(AuditError::UnknownCandidate {
            prompt_id: e.prompt_id.clone(),
            candidate_id: e.candidate_a.clone(),
        });
    }
    let (mut vo, mut vr, mut vj, mut pcs) = (vec![], vec![], vec![], vec![]);
    let mut covered = 0;
    for g in ds.groups() {
        let ids: Vec<String> = g.candidates.iter().map(|c| c.candidate_id.clone()).collect();
        let prompt_edges = by_prompt.get(g.prompt_id.as_str()).cloned().unwrap_or_default();
        if !prompt_edges.is_empty() {
            covered += 1;
        }
        let borda = borda_select(prompt_edges, &ids)?;
        let o = g.oracle_labels().expect("labeled");
        vo.push(stats::max(&o));
        vr.push(stats::mean(&o));
        vj.push(judge_pick_value(&borda.scores, &o));
        pcs.push(crate::metrics::top1_hit(&borda.scores, &o));
    }
    let values = SelectionValues {
        v_oracle: prompt_average(&vo),
        v_random: prompt_average(&vr),
        v_judge: prompt_average(&vj),
    };
    Ok(BordaSelection {
        recovery: values.recovery().ok(),
        values,
        pcs: prompt_average(&pcs),
        edge_coverage: covered as f64 / ds.n_prompts() as f64,
        n_edges: edges.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_stated: f64,
    pub observed_a_rate: f64,
    pub abs_error: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    /// Non-empty bins only.
    pub bins: Vec<CalibrationBin>,
    /// Unweighted mean of bin errors.
    pub mean_bin_error: f64,
    /// Records with a stated probability and an oracle preference.
    pub n_records: usize,
}

pub const DEFAULT_BIN_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Bins records by `stated_prob_a` (left-closed, last bin closed) and
/// compares each bin's mean stated probability with its observed A-win rate.
/// Only records with an oracle preference count.
pub fn confidence_calibration(pw: &PairwiseDataset, bin_edges: &[f64]) -> Result<CalibrationTable> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(AuditError::Config("bin edges must be strictly increasing, at least 2".into()));
    }
    let k = bin_edges.len() - 1;
    let (mut sum_p, mut wins, mut counts) = (vec![0.0; k], vec![0usize; k], vec![0usize; k]);
    let last = bin_edges[k];
    let mut n = 0;
    for r in pw.records() {
        let (Some(p), false) = (r.stated_prob_a, r.oracle_choice.is_tie()) else {
            continue;
        };
        let bin = if p == last {
            k - 1
        } else {
            match bin_edges.windows(2).position(|w| w[0] <= p && p < w[1]) {
                Some(b) => b,
                None => {
                    return Err(AuditError::Config(format!(
                        "stated probability {p} outside the bin range"
                    )))
                }
            }
        };
        n += 1;
        sum_p[bin] += p;
        counts[bin] += 1;
        if r.oracle_choice == Choice::A {
            wins[bin] += 1;
        }
    }
    if n == 0 {
        return Err(AuditError::NoComparablePairs(
            "no record has both a stated probability and an oracle preference".into(),
        ));
    }
    let bins: Vec<CalibrationBin> = (0..k)
        .filter(|&b| counts[b] > 0)
        .map(|b| {
            let mean_stated = sum_p[b] / counts[b] as f64;
            let observed = wins[b] as f64 / counts[b] as f64;
            CalibrationBin {
                lo: bin_edges[b],
                hi: bin_edges[b + 1],
                mean_stated,
                observed_a_rate: observed,
                abs_error: (mean_stated - observed).abs(),
                count: counts[b],
            }
        })
        .collect();
    let mean_bin_error = bins.iter().map(|b| b.abs_error).sum::<f64>() / bins.len() as f64;
    Ok(CalibrationTable {
        bins,
        mean_bin_error,
        n_records: n,
    })
}

impl PairwiseStats {
    pub fn to_markdown(&self) -> String {
        let agreement = self.agreement.map(fmt_pct).unwrap_or_else(|| "n/a".into());
        format!(
            "## Pairwise audit\n\n| Tie Rate | Agreement | p_eff | Recovery |\n|---|---|---|---|\n| {} | {} | {} | {} |\n\n\
             {} records; {} with an oracle preference (p_eff and recovery); {} decided on both sides (agreement).\n",
            fmt_pct(self.tie_rate),
            agreement,
            fmt_pct(self.p_eff),
            fmt_pct(self.recovery_bo2),
            self.n_records,
            self.n_oracle_decided,
            self.n_both_decided
        )
    }
}

impl CalibrationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "## Stated-probability calibration\n\n| Bin | Stated P(A) | Observed A-win | Error | Count |\n|---|---|---|---|---|\n",
        );
        for b in &self.bins {
            let _ = writeln!(
                out,
                "| P in [{:.1}, {:.1}] | {:.2} | {:.2} | {:.2} | {} |",
                b.lo, b.hi, b.mean_stated, b.observed_a_rate, b.abs_error, b.count
            );
        }
        let _ = writeln!(
            out,
            "\nMean bin error: {} over {} records.",
            fmt_num(self.mean_bin_error),
            self.n_records
        );
        out
    }
}
