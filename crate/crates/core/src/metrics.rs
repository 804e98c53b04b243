//! Pointwise decision-validity metrics on fully labeled data.
//!
//! Everything here treats each prompt as one selection decision. Random
//! tie-breaking on the judge side is evaluated as an exact expectation over
//! the tie set, so no metric draws random numbers. Score equality is exact
//! float equality after normalization.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::PointwiseDataset;
use crate::error::{AuditError, Result};
use crate::inference::{bootstrap_replicates, BootstrapConfig, ClusterSample};
use crate::report::{metric_row, Metric};
use crate::stats::{self, argmax_set, mean};

/// Judge and oracle scores in flat arrays, one contiguous block per prompt.
///
/// This is the working representation for every pointwise metric; it is cheap
/// to resample and to build directly from simulation output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    offsets: Vec<usize>,
    judge: Vec<f64>,
    oracle: Vec<f64>,
}

impl ScoreTable {
    /// Requires every record to carry an oracle label.
    pub fn from_dataset(ds: &PointwiseDataset) -> Result<Self> {
        ds.require_labeled()?;
        let mut offsets = Vec::with_capacity(ds.n_prompts() + 1);
        let mut judge = Vec::with_capacity(ds.n_records());
        let mut oracle = Vec::with_capacity(ds.n_records());
        offsets.push(0);
        for g in ds.groups() {
            for c in &g.candidates {
                judge.push(c.judge_score);
                oracle.push(c.oracle_label.expect("checked by require_labeled"));
            }
            offsets.push(judge.len());
        }
        Ok(ScoreTable {
            offsets,
            judge,
            oracle,
        })
    }

    /// Builds a table from per-prompt candidate counts and flat score arrays.
    pub fn from_parts(sizes: &[usize], judge: Vec<f64>, oracle: Vec<f64>) -> Result<Self> {
        if judge.len() != oracle.len() {
            return Err(AuditError::LengthMismatch {
                left: judge.len(),
                right: oracle.len(),
            });
        }
        let total: usize = sizes.iter().sum();
        if total != judge.len() {
            return Err(AuditError::LengthMismatch {
                left: total,
                right: judge.len(),
            });
        }
        if sizes.is_empty() || sizes.iter().any(|&n| n < 2) {
            return Err(AuditError::validation("every prompt needs at least 2 candidates"));
        }
        if judge.iter().chain(&oracle).any(|v| !v.is_finite()) {
            return Err(AuditError::validation("non-finite score"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for n in sizes {
            offsets.push(offsets.last().unwrap() + n);
        }
        Ok(ScoreTable {
            offsets,
            judge,
            oracle,
        })
    }

    /// Equal-size prompts over flat arrays.
    pub fn uniform(n_candidates: usize, judge: Vec<f64>, oracle: Vec<f64>) -> Result<Self> {
        if n_candidates == 0 || !judge.len().is_multiple_of(n_candidates) {
            return Err(AuditError::validation("array length is not a multiple of the prompt size"));
        }
        let sizes = vec![n_candidates; judge.len() / n_candidates];
        Self::from_parts(&sizes, judge, oracle)
    }

    pub fn n_prompts(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_records(&self) -> usize {
        self.judge.len()
    }

    pub fn judge(&self) -> &[f64] {
        &self.judge
    }

    pub fn oracle(&self) -> &[f64] {
        &self.oracle
    }

    /// Judge and oracle slices of prompt `i`.
    pub fn prompt(&self, i: usize) -> (&[f64], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.judge[r.clone()], &self.oracle[r])
    }

    pub fn prompts(&self) -> impl ExactSizeIterator<Item = (&[f64], &[f64])> + '_ {
        (0..self.n_prompts()).map(move |i| self.prompt(i))
    }

    pub fn map_judge(&self, f: impl Fn(f64) -> f64) -> ScoreTable {
        ScoreTable {
            offsets: self.offsets.clone(),
            judge: self.judge.iter().map(|&s| f(s)).collect(),
            oracle: self.oracle.clone(),
        }
    }

    /// A copy with the judge column replaced.
    pub fn with_judge(&self, judge: Vec<f64>) -> Result<ScoreTable> {
        if judge.len() != self.judge.len() {
            return Err(AuditError::LengthMismatch {
                left: judge.len(),
                right: self.judge.len(),
            });
        }
        Ok(ScoreTable {
            offsets: self.offsets.clone(),
            judge,
            oracle: self.oracle.clone(),
        })
    }

    /// Prompts `0..k`.
    pub fn head(&self, k: usize) -> ScoreTable {
        let idx: Vec<usize> = (0..k.min(self.n_prompts())).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> ScoreTable {
        let mut offsets = Vec::with_capacity(indices.len() + 1);
        offsets.push(0);
        let mut judge = Vec::new();
        let mut oracle = Vec::new();
        for &i in indices {
            let (s, o) = self.prompt(i);
            judge.extend_from_slice(s);
            oracle.extend_from_slice(o);
            offsets.push(judge.len());
        }
        ScoreTable {
            offsets,
            judge,
            oracle,
        }
    }

    pub fn concat(&self, other: &ScoreTable) -> ScoreTable {
        let base = self.n_records();
        let mut offsets = self.offsets.clone();
        offsets.extend(other.offsets[1..].iter().map(|o| o + base));
        let mut judge = self.judge.clone();
        judge.extend_from_slice(&other.judge);
        let mut oracle = self.oracle.clone();
        oracle.extend_from_slice(&other.oracle);
        ScoreTable {
            offsets,
            judge,
            oracle,
        }
    }
}

impl ClusterSample for ScoreTable {
    fn n_clusters(&self) -> usize {
        self.n_prompts()
    }

    fn resample(&self, indices: &[usize]) -> Self {
        self.select(indices)
    }
}

/// Oracle value of judge-greedy selection on one prompt: the mean oracle
/// value over the judge's tie set.
pub fn judge_pick_value(judge: &[f64], oracle: &[f64]) -> f64 {
    let picked: Vec<f64> = argmax_set(judge).into_iter().map(|i| oracle[i]).collect();
    let lo = picked.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = stats::max(&picked);
    mean(&picked).clamp(lo, hi)
}

/// Probability that judge-greedy selection with uniform tie-breaking lands on
/// a candidate attaining the oracle maximum.
pub fn top1_hit(judge: &[f64], oracle: &[f64]) -> f64 {
    let tie_set = argmax_set(judge);
    let best = stats::max(oracle);
    let hits = tie_set.iter().filter(|&&i| oracle[i] == best).count();
    hits as f64 / tie_set.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub prompt: usize,
    pub prompt_mean_judge: f64,
    pub prompt_mean_oracle: f64,
    pub judge_residual: f64,
    pub oracle_residual: f64,
}

/// Prompt-mean decomposition of both channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTable {
    pub rows: Vec<ResidualRow>,
}

impl ResidualTable {
    pub fn judge_residuals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.judge_residual).collect()
    }

    pub fn oracle_residuals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.oracle_residual).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionValues {
    pub v_oracle: f64,
    pub v_random: f64,
    pub v_judge: f64,
}

impl SelectionValues {
    /// (v_judge - v_random) / (v_oracle - v_random).
    pub fn recovery(&self) -> Result<f64> {
        let denom = self.v_oracle - self.v_random;
        if denom <= 0.0 {
            return Err(AuditError::DegenerateDenominator(
                "every prompt's candidates share one oracle value".into(),
            ));
        }
        Ok((self.v_judge - self.v_random) / denom)
    }
}

/// Variance fractions per channel; each pair sums to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub between_judge: f64,
    pub within_judge: f64,
    pub between_oracle: f64,
    pub within_oracle: f64,
    pub total_judge: f64,
    pub total_oracle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallSummary {
    pub mean_tau_b: f64,
    pub evaluated_prompts: usize,
    pub skipped_prompts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TieDiagnostics {
    pub judge_pairwise_tie_rate: f64,
    /// Absent when some records are unlabeled.
    pub oracle_pairwise_tie_rate: Option<f64>,
    pub top1_margin_tie_rate: f64,
    pub unique_judge_values: usize,
}

impl ScoreTable {
    pub fn residuals(&self) -> ResidualTable {
        let mut rows = Vec::with_capacity(self.n_records());
        for (p, (s, o)) in self.prompts().enumerate() {
            let ms = mean(s);
            let mo = mean(o);
            for (x, y) in s.iter().zip(o) {
                rows.push(ResidualRow {
                    prompt: p,
                    prompt_mean_judge: ms,
                    prompt_mean_oracle: mo,
                    judge_residual: x - ms,
                    oracle_residual: y - mo,
                });
            }
        }
        ResidualTable { rows }
    }

    pub fn global_correlation(&self) -> Result<f64> {
        stats::pearson(&self.judge, &self.oracle).ok_or_else(|| {
            AuditError::DegenerateVariance("degenerate pooled score variance".into())
        })
    }

    pub fn variance_decomposition(&self) -> Result<VarianceDecomposition> {
        if self.n_prompts() < 2 {
            return Err(AuditError::InsufficientData(
                "variance decomposition needs at least 2 prompts".into(),
            ));
        }
        let channel = |values: &[f64]| -> (f64, f64) {
            let n = values.len() as f64;
            let grand = mean(values);
            let (mut between, mut within) = (0.0, 0.0);
            for i in 0..self.n_prompts() {
                let block = &values[self.offsets[i]..self.offsets[i + 1]];
                let m = mean(block);
                between += block.len() as f64 * (m - grand) * (m - grand);
                within += block.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            (between / n, within / n)
        };
        let (bj, wj) = channel(&self.judge);
        let (bo, wo) = channel(&self.oracle);
        let (tj, to) = (bj + wj, bo + wo);
        if tj <= 0.0 || to <= 0.0 {
            return Err(AuditError::DegenerateVariance(
                "degenerate total variance".into(),
            ));
        }
        Ok(VarianceDecomposition {
            between_judge: bj / tj,
            within_judge: wj / tj,
            between_oracle: bo / to,
            within_oracle: wo / to,
            total_judge: tj,
            total_oracle: to,
        })
    }

    /// Counts over within-prompt unordered pairs: (agreeing, disagreeing,
    /// judge-tied) among pairs whose oracle difference is nonzero.
    fn pair_counts(&self) -> (usize, usize, usize) {
        let (mut agree, mut disagree, mut judge_tied) = (0, 0, 0);
        for (s, o) in self.prompts() {
            for i in 0..s.len() {
                for j in (i + 1)..s.len() {
                    let ds = s[i] - s[j];
                    let d_o = o[i] - o[j];
                    if d_o == 0.0 {
                        continue;
                    }
                    if ds == 0.0 {
                        judge_tied += 1;
                    } else if (ds > 0.0) == (d_o > 0.0) {
                        agree += 1;
                    } else {
                        disagree += 1;
                    }
                }
            }
        }
        (agree, disagree, judge_tied)
    }

    /// p_nt: sign agreement over pairs where neither channel ties.
    pub fn sign_agreement(&self) -> Result<f64> {
        let (agree, disagree, _) = self.pair_counts();
        if agree + disagree == 0 {
            return Err(AuditError::NoComparablePairs(
                "no within-prompt pair is untied in both channels".into(),
            ));
        }
        Ok(agree as f64 / (agree + disagree) as f64)
    }

    /// p_eff: agreement over oracle-untied pairs, judge ties counted as 1/2.
    pub fn tie_adjusted_agreement(&self) -> Result<f64> {
        let (agree, disagree, tied) = self.pair_counts();
        let total = agree + disagree + tied;
        if total == 0 {
            return Err(AuditError::NoComparablePairs(
                "no within-prompt pair has an oracle preference".into(),
            ));
        }
        Ok((agree as f64 + 0.5 * tied as f64) / total as f64)
    }

    pub fn mean_kendall_tau(&self) -> Result<KendallSummary> {
        let taus: Vec<f64> = self
            .prompts()
            .filter_map(|(s, o)| stats::kendall_tau_b(s, o))
            .collect();
        let skipped = self.n_prompts() - taus.len();
        if taus.is_empty() {
            return Err(AuditError::AllSkipped { skipped });
        }
        Ok(KendallSummary {
            mean_tau_b: taus.iter().sum::<f64>() / taus.len() as f64,
            evaluated_prompts: taus.len(),
            skipped_prompts: skipped,
        })
    }

    pub fn selection_values(&self) -> SelectionValues {
        let n = self.n_prompts();
        let (mut oracle, mut random, mut judge) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (s, o) in self.prompts() {
            oracle.push(stats::max(o));
            random.push(mean(o));
            judge.push(judge_pick_value(s, o));
        }
        SelectionValues {
            v_oracle: prompt_average(&oracle),
            v_random: prompt_average(&random),
            v_judge: prompt_average(&judge),
        }
    }

    pub fn recovery(&self) -> Result<f64> {
        self.selection_values().recovery()
    }

    /// PCS_n: mean over prompts of the top-1 hit probability.
    pub fn top1_accuracy(&self) -> f64 {
        let hits: Vec<f64> = self.prompts().map(|(s, o)| top1_hit(s, o)).collect();
        prompt_average(&hits)
    }

    pub fn tie_diagnostics(&self) -> TieDiagnostics {
        let (judge_rate, top1) = judge_tie_rates(self.prompts().map(|(s, _)| s));
        let (oracle_rate, _) = judge_tie_rates(self.prompts().map(|(_, o)| o));
        TieDiagnostics {
            judge_pairwise_tie_rate: judge_rate,
            oracle_pairwise_tie_rate: Some(oracle_rate),
            top1_margin_tie_rate: top1,
            unique_judge_values: count_unique(&self.judge),
        }
    }
}

/// Mean over prompts. The estimators in [`crate::inference`] use the same
/// reduction so their fully labeled special case matches bit for bit.
pub fn prompt_average(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn judge_tie_rates<'a>(blocks: impl Iterator<Item = &'a [f64]>) -> (f64, f64) {
    let (mut pairs, mut tied, mut prompts, mut top_tied) = (0usize, 0usize, 0usize, 0usize);
    for s in blocks {
        prompts += 1;
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                pairs += 1;
                if s[i] == s[j] {
                    tied += 1;
                }
            }
        }
        if argmax_set(s).len() >= 2 {
            top_tied += 1;
        }
    }
    (
        tied as f64 / pairs.max(1) as f64,
        top_tied as f64 / prompts.max(1) as f64,
    )
}

fn count_unique(values: &[f64]) -> usize {
    let mut v: Vec<f64> = values.iter().map(|&x| if x == 0.0 { 0.0 } else { x }).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

impl ResidualTable {
    /// Pearson correlation of pooled residuals.
    pub fn within_correlation(&self) -> Result<f64> {
        let es = self.judge_residuals();
        let eo = self.oracle_residuals();
        if es.iter().all(|&e| e == 0.0) {
            return Err(AuditError::DegenerateVariance(
                "degenerate judge residual variance".into(),
            ));
        }
        if eo.iter().all(|&e| e == 0.0) {
            return Err(AuditError::DegenerateVariance(
                "degenerate oracle residual variance".into(),
            ));
        }
        stats::pearson(&es, &eo).ok_or_else(|| {
            AuditError::DegenerateVariance("degenerate residual variance".into())
        })
    }

    /// Least-squares slope of judge residuals on oracle residuals, no intercept.
    pub fn attenuation_slope(&self) -> Result<f64> {
        let (mut sxy, mut syy) = (0.0, 0.0);
        for r in &self.rows {
            sxy += r.judge_residual * r.oracle_residual;
            syy += r.oracle_residual * r.oracle_residual;
        }
        if syy <= 0.0 {
            return Err(AuditError::DegenerateVariance(
                "degenerate oracle residual variance".into(),
            ));
        }
        Ok(sxy / syy)
    }
}

pub fn decompose(ds: &PointwiseDataset) -> Result<ResidualTable> {
    Ok(ScoreTable::from_dataset(ds)?.residuals())
}

pub fn global_correlation(ds: &PointwiseDataset) -> Result<f64> {
    ScoreTable::from_dataset(ds)?.global_correlation()
}

pub fn within_correlation(rt: &ResidualTable) -> Result<f64> {
    rt.within_correlation()
}

pub fn attenuation_slope(rt: &ResidualTable) -> Result<f64> {
    rt.attenuation_slope()
}

pub fn variance_decomposition(ds: &PointwiseDataset) -> Result<VarianceDecomposition> {
    ScoreTable::from_dataset(ds)?.variance_decomposition()
}

pub fn sign_agreement(ds: &PointwiseDataset) -> Result<f64> {
    ScoreTable::from_dataset(ds)?.sign_agreement()
}

pub fn tie_adjusted_agreement(ds: &PointwiseDataset) -> Result<f64> {
    ScoreTable::from_dataset(ds)?.tie_adjusted_agreement()
}

pub fn mean_kendall_tau(ds: &PointwiseDataset) -> Result<KendallSummary> {
    ScoreTable::from_dataset(ds)?.mean_kendall_tau()
}

pub fn selection_values(ds: &PointwiseDataset) -> Result<SelectionValues> {
    Ok(ScoreTable::from_dataset(ds)?.selection_values())
}

pub fn recovery(ds: &PointwiseDataset) -> Result<f64> {
    ScoreTable::from_dataset(ds)?.recovery()
}

pub fn top1_accuracy(ds: &PointwiseDataset) -> Result<f64> {
    Ok(ScoreTable::from_dataset(ds)?.top1_accuracy())
}

/// Tie structure. Judge rates need only scores; the oracle rate is absent
/// when any record is unlabeled.
pub fn tie_diagnostics(ds: &PointwiseDataset) -> TieDiagnostics {
    let judge: Vec<Vec<f64>> = ds.groups().iter().map(|g| g.judge_scores()).collect();
    let (judge_rate, top1) = judge_tie_rates(judge.iter().map(Vec::as_slice));
    let oracle: Option<Vec<Vec<f64>>> = ds.groups().iter().map(|g| g.oracle_labels()).collect();
    let flat: Vec<f64> = judge.concat();
    TieDiagnostics {
        judge_pairwise_tie_rate: judge_rate,
        oracle_pairwise_tie_rate: oracle.map(|o| judge_tie_rates(o.iter().map(Vec::as_slice)).0),
        top1_margin_tie_rate: top1,
        unique_judge_values: count_unique(&flat),
    }
}

/// Explains how p_eff treats ties; embedded in every report.
pub const P_EFF_CONDITIONING: &str =
    "p_eff is computed over within-prompt pairs with an oracle preference; judge ties count as 1/2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionValueMetrics {
    pub v_oracle: Metric,
    pub v_random: Metric,
    pub v_judge: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieMetrics {
    pub judge_pairwise_tie_rate: Metric,
    pub oracle_pairwise_tie_rate: Metric,
    pub top1_margin_tie_rate: Metric,
    pub unique_judge_values: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub resamples: usize,
    pub seed: u64,
    pub interval: [f64; 2],
}

/// The full pointwise audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n_prompts: usize,
    pub n_records: usize,
    pub n_per_prompt: Option<usize>,
    pub global_r: Metric,
    pub within_r: Metric,
    pub alpha: Metric,
    pub variance_between_judge: Metric,
    pub variance_within_judge: Metric,
    pub variance_between_oracle: Metric,
    pub variance_within_oracle: Metric,
    pub p_nt: Metric,
    pub p_eff: Metric,
    pub p_eff_conditioning: String,
    pub mean_tau_b: Metric,
    pub tau_skipped_prompts: usize,
    pub selection_values: SelectionValueMetrics,
    pub recovery: Metric,
    pub pcs_n: Metric,
    pub tie_diagnostics: TieMetrics,
    pub bootstrap: Option<BootstrapSummary>,
}

const N_FLAT: usize = 18;

/// Every scalar of the report in a fixed order, so point estimates and
/// bootstrap replicates share one code path.
fn flat_metrics(t: &ScoreTable) -> [Result<f64>; N_FLAT] {
    let rt = t.residuals();
    let var = t.variance_decomposition();
    let sel = t.selection_values();
    let ties = t.tie_diagnostics();
    let pick = |f: fn(&VarianceDecomposition) -> f64| match &var {
        Ok(v) => Ok(f(v)),
        Err(e) => Err(clone_err(e)),
    };
    [
        t.global_correlation(),
        rt.within_correlation(),
        rt.attenuation_slope(),
        pick(|v| v.between_judge),
        pick(|v| v.within_judge),
        pick(|v| v.between_oracle),
        pick(|v| v.within_oracle),
        t.sign_agreement(),
        t.tie_adjusted_agreement(),
        t.mean_kendall_tau().map(|k| k.mean_tau_b),
        Ok(sel.v_oracle),
        Ok(sel.v_random),
        Ok(sel.v_judge),
        sel.recovery(),
        Ok(t.top1_accuracy()),
        Ok(ties.judge_pairwise_tie_rate),
        Ok(ties.oracle_pairwise_tie_rate.unwrap_or(f64::NAN)),
        Ok(ties.top1_margin_tie_rate),
    ]
}

fn clone_err(e: &AuditError) -> AuditError {
    match e {
        AuditError::InsufficientData(m) => AuditError::InsufficientData(m.clone()),
        AuditError::DegenerateVariance(m) => AuditError::DegenerateVariance(m.clone()),
        other => AuditError::DegenerateInput(other.to_string()),
    }
}

/// Computes every metric; a metric whose precondition fails is reported as
/// absent with a reason. With a bootstrap config, attaches percentile CIs
/// from a prompt-level cluster bootstrap.
pub fn audit(ds: &PointwiseDataset, bootstrap: Option<&BootstrapConfig>) -> Result<AuditReport> {
    let table = ScoreTable::from_dataset(ds)?;
    audit_table(&table, ds.n_per_prompt(), bootstrap)
}

pub fn audit_table(
    table: &ScoreTable,
    n_per_prompt: Option<usize>,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<AuditReport> {
    let mut metrics: Vec<Metric> = flat_metrics(table)
        .into_iter()
        .map(Metric::from_result)
        .collect();

    if let Some(cfg) = bootstrap {
        cfg.validate()?;
        let reps: Vec<[Option<f64>; N_FLAT]> = bootstrap_replicates(table, cfg, |t| {
            flat_metrics(t).map(|r| r.ok().filter(|v| v.is_finite()))
        });
        for (k, metric) in metrics.iter_mut().enumerate() {
            if !metric.is_present() {
                continue;
            }
            let column: Vec<f64> = reps.iter().filter_map(|r| r[k]).collect();
            match cfg.percentile_interval(column, reps.len()) {
                Ok(ci) => metric.ci = Some(ci),
                Err(e) => metric.ci_note = Some(e.to_string()),
            }
        }
    }

    let tau = table.mean_kendall_tau();
    let ties = table.tie_diagnostics();
    let mut it = metrics.into_iter();
    let mut next = || it.next().expect("flat metric count");
    Ok(AuditReport {
        n_prompts: table.n_prompts(),
        n_records: table.n_records(),
        n_per_prompt,
        global_r: next(),
        within_r: next(),
        alpha: next(),
        variance_between_judge: next(),
        variance_within_judge: next(),
        variance_between_oracle: next(),
        variance_within_oracle: next(),
        p_nt: next(),
        p_eff: next(),
        p_eff_conditioning: P_EFF_CONDITIONING.to_string(),
        mean_tau_b: next(),
        tau_skipped_prompts: match &tau {
            Ok(k) => k.skipped_prompts,
            Err(_) => table.n_prompts(),
        },
        selection_values: SelectionValueMetrics {
            v_oracle: next(),
            v_random: next(),
            v_judge: next(),
        },
        recovery: next(),
        pcs_n: next(),
        tie_diagnostics: TieMetrics {
            judge_pairwise_tie_rate: next(),
            oracle_pairwise_tie_rate: next(),
            top1_margin_tie_rate: next(),
            unique_judge_values: ties.unique_judge_values,
        },
        bootstrap: bootstrap.map(|c| BootstrapSummary {
            resamples: c.resamples,
            seed: c.seed,
            interval: c.interval,
        }),
    })
}

impl AuditReport {
    /// Markdown rendering: the headline metric table first, then selection
    /// values, variance decomposition and tie structure.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "## Decision-validity audit\n\n{} prompts, {} records{}.\n",
            self.n_prompts,
            self.n_records,
            self.n_per_prompt
                .map(|n| format!(", best-of-{n}"))
                .unwrap_or_default()
        );
        out.push_str("| Metric | Point Estimate | 95% CI |\n|---|---|---|\n");
        out.push_str(&metric_row("Global r", &self.global_r, false));
        out.push_str(&metric_row("Within-prompt r", &self.within_r, false));
        out.push_str(&metric_row("alpha (attenuation)", &self.alpha, false));
        out.push_str(&metric_row("p_nt (conditional sign agree)", &self.p_nt, true));
        out.push_str(&metric_row("mean tau_b within (ranking)", &self.mean_tau_b, false));
        out.push_str(&metric_row("p_eff (tie-aware)", &self.p_eff, true));
        out.push_str(&metric_row("Recovery rate", &self.recovery, true));
        out.push_str(&metric_row("Top-1 accuracy", &self.pcs_n, true));
        let _ = writeln!(
            out,
            "\n{} prompt(s) skipped for tau_b (a channel fully tied). {}.\n",
            self.tau_skipped_prompts, self.p_eff_conditioning
        );

        out.push_str("### Selection values\n\n| Strategy | Value | 95% CI |\n|---|---|---|\n");
        out.push_str(&metric_row("Oracle-optimal", &self.selection_values.v_oracle, false));
        out.push_str(&metric_row("Judge-greedy", &self.selection_values.v_judge, false));
        out.push_str(&metric_row("Random", &self.selection_values.v_random, false));

        out.push_str("\n### Variance decomposition\n\n| Component | Fraction | 95% CI |\n|---|---|---|\n");
        out.push_str(&metric_row("Judge between-prompt", &self.variance_between_judge, true));
        out.push_str(&metric_row("Judge within-prompt", &self.variance_within_judge, true));
        out.push_str(&metric_row("Oracle between-prompt", &self.variance_between_oracle, true));
        out.push_str(&metric_row("Oracle within-prompt", &self.variance_within_oracle, true));

        out.push_str("\n### Tie structure\n\n| Quantity | Rate | 95% CI |\n|---|---|---|\n");
        out.push_str(&metric_row("Judge pairwise ties", &self.tie_diagnostics.judge_pairwise_tie_rate, true));
        out.push_str(&metric_row("Oracle pairwise ties", &self.tie_diagnostics.oracle_pairwise_tie_rate, true));
        out.push_str(&metric_row("Top-1 margin ties", &self.tie_diagnostics.top1_margin_tie_rate, true));
        let _ = writeln!(
            out,
            "\nDistinct judge score values: {}.",
            self.tie_diagnostics.unique_judge_values
        );
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(
                out,
                "\nIntervals: prompt-level cluster bootstrap, {} resamples, seed {}, percentiles {}-{}.",
                b.resamples, b.seed, b.interval[0], b.interval[1]
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeMixPoint {
    pub fraction: f64,
    pub easy_prompts: usize,
    pub global_r: Option<f64>,
    pub p_nt: Option<f64>,
    pub recovery: Option<f64>,
}

/// Metrics on the hard set plus the first `ceil(f * |easy|)` easy prompts, for
/// each mixing fraction `f`.
pub fn regime_mix_sweep(
    hard: &PointwiseDataset,
    easy: &PointwiseDataset,
    fractions: &[f64],
) -> Result<Vec<RegimeMixPoint>> {
    regime_mix_sweep_tables(
        &ScoreTable::from_dataset(hard)?,
        &ScoreTable::from_dataset(easy)?,
        fractions,
    )
}

pub fn regime_mix_sweep_tables(
    hard: &ScoreTable,
    easy: &ScoreTable,
    fractions: &[f64],
) -> Result<Vec<RegimeMixPoint>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(AuditError::Config("mixing fractions must lie in [0, 1]".into()));
    }
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(AuditError::Config("mixing fractions must be sorted".into()));
    }
    Ok(fractions
        .iter()
        .map(|&f| {
            let k = (f * easy.n_prompts() as f64).ceil() as usize;
            let mixed = if k == 0 { hard.clone() } else { hard.concat(&easy.head(k)) };
            RegimeMixPoint {
                fraction: f,
                easy_prompts: k,
                global_r: mixed.global_correlation().ok(),
                p_nt: mixed.sign_agreement().ok(),
                recovery: mixed.recovery().ok(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CandidateRecord, PromptGroup};
    use proptest::prelude::*;

    pub(crate) fn dataset(prompts: &[(&[f64], &[f64])]) -> PointwiseDataset {
        let groups = prompts
            .iter()
            .enumerate()
            .map(|(p, (s, o))| PromptGroup {
                prompt_id: format!("P{}", p + 1),
                candidates: s
                    .iter()
                    .zip(o.iter())
                    .enumerate()
                    .map(|(i, (&s, &o))| CandidateRecord::labeled(format!("P{}", p + 1), format!("c{i}"), s, o))
                    .collect(),
            })
            .collect();
        PointwiseDataset::new_unbounded(groups).unwrap()
    }

    fn d1() -> PointwiseDataset {
        dataset(&[(&[0.8, 0.2], &[1.0, 0.0]), (&[0.6, 0.4], &[0.0, 1.0])])
    }

    fn d2() -> PointwiseDataset {
        dataset(&[(&[0.5; 4], &[0.90, 0.70, 0.69, 0.68])])
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn decompose_d1() {
        let rt = decompose(&d1()).unwrap();
        let r = &rt.rows;
        assert!(close(r[0].prompt_mean_judge, 0.5, 1e-15));
        assert!(close(r[0].judge_residual, 0.3, 1e-12));
        assert!(close(r[1].judge_residual, -0.3, 1e-12));
        assert_eq!(r[0].oracle_residual, 0.5);
        assert_eq!(r[1].oracle_residual, -0.5);
        for p in 0..2 {
            let sum_s: f64 = r.iter().filter(|x| x.prompt == p).map(|x| x.judge_residual).sum();
            let sum_o: f64 = r.iter().filter(|x| x.prompt == p).map(|x| x.oracle_residual).sum();
            assert!(sum_s.abs() < 1e-12 && sum_o.abs() < 1e-12);
        }
        let flat = decompose(&dataset(&[(&[0.3, 0.3, 0.3], &[0.1, 0.1, 0.1])])).unwrap();
        assert!(flat.rows.iter().all(|r| r.judge_residual == 0.0 && r.oracle_residual == 0.0));
    }

    #[test]
    fn correlations_on_d1() {
        let ds = d1();
        assert!(close(global_correlation(&ds).unwrap(), 0.4472135955, 1e-9));
        let rt = decompose(&ds).unwrap();
        assert!(close(within_correlation(&rt).unwrap(), 0.4472135955, 1e-9));
        assert!(close(attenuation_slope(&rt).unwrap(), 0.2, 1e-12));
    }

    #[test]
    fn correlation_edge_cases() {
        let same = dataset(&[(&[0.1, 0.9, 0.4], &[0.1, 0.9, 0.4]), (&[0.2, 0.3], &[0.2, 0.3])]);
        assert!(close(global_correlation(&same).unwrap(), 1.0, 1e-12));
        let rt = decompose(&same).unwrap();
        assert!(close(within_correlation(&rt).unwrap(), 1.0, 1e-12));
        assert!(close(attenuation_slope(&rt).unwrap(), 1.0, 1e-12));
        let doubled = dataset(&[(&[0.2, 1.8, 0.8], &[0.1, 0.9, 0.4])]);
        assert!(close(attenuation_slope(&decompose(&doubled).unwrap()).unwrap(), 2.0, 1e-12));
        let flat = dataset(&[(&[0.5, 0.5], &[0.1, 0.9]), (&[0.5, 0.5], &[0.2, 0.3])]);
        assert!(matches!(global_correlation(&flat), Err(AuditError::DegenerateVariance(_))));
        assert!(matches!(
            within_correlation(&decompose(&d2()).unwrap()),
            Err(AuditError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn variance_decomposition_cases() {
        let v = variance_decomposition(&d1()).unwrap();
        assert_eq!(v.between_oracle, 0.0);
        assert_eq!(v.within_oracle, 1.0);
        assert!(close(v.between_judge + v.within_judge, 1.0, 1e-12));
        let between_only = dataset(&[(&[0.2, 0.2], &[0.1, 0.1]), (&[0.7, 0.7], &[0.6, 0.6])]);
        let v = variance_decomposition(&between_only).unwrap();
        assert_eq!(v.within_judge, 0.0);
        assert_eq!(v.within_oracle, 0.0);
    }

    #[test]
    fn pairwise_agreement_cases() {
        assert_eq!(sign_agreement(&d1()).unwrap(), 0.5);
        assert!(matches!(sign_agreement(&d2()), Err(AuditError::NoComparablePairs(_))));
        assert_eq!(tie_adjusted_agreement(&d2()).unwrap(), 0.5);
        assert_eq!(tie_adjusted_agreement(&d1()).unwrap(), 0.5);
        let same = dataset(&[(&[0.1, 0.9, 0.4], &[0.1, 0.9, 0.4])]);
        assert_eq!(sign_agreement(&same).unwrap(), 1.0);
        assert_eq!(tie_adjusted_agreement(&same).unwrap(), 1.0);
    }

    #[test]
    fn kendall_cases() {
        let up = dataset(&[(&[3.0, 2.0, 1.0], &[0.9, 0.5, 0.1])]);
        assert_eq!(mean_kendall_tau(&up).unwrap().mean_tau_b, 1.0);
        let down = dataset(&[(&[3.0, 2.0, 1.0], &[0.1, 0.5, 0.9])]);
        assert_eq!(mean_kendall_tau(&down).unwrap().mean_tau_b, -1.0);
        assert!(matches!(mean_kendall_tau(&d2()), Err(AuditError::AllSkipped { skipped: 1 })));
        let mixed = dataset(&[(&[3.0, 2.0, 1.0], &[0.9, 0.5, 0.1]), (&[0.5; 4], &[0.90, 0.70, 0.69, 0.68])]);
        let k = mean_kendall_tau(&mixed).unwrap();
        assert_eq!((k.mean_tau_b, k.skipped_prompts), (1.0, 1));
    }

    #[test]
    fn selection_values_and_recovery() {
        let sv = selection_values(&d2()).unwrap();
        assert!(close(sv.v_judge, 0.7425, 1e-15));
        assert!(close(recovery(&d2()).unwrap(), 0.0, 1e-15));
        let sv = selection_values(&d1()).unwrap();
        assert_eq!((sv.v_oracle, sv.v_random, sv.v_judge), (1.0, 0.5, 0.5));
        assert_eq!(recovery(&d1()).unwrap(), 0.0);
        let same = dataset(&[(&[0.1, 0.9, 0.4], &[0.1, 0.9, 0.4]), (&[0.2, 0.3], &[0.2, 0.3])]);
        let sv = selection_values(&same).unwrap();
        assert_eq!(sv.v_judge, sv.v_oracle);
        assert_eq!(recovery(&same).unwrap(), 1.0);
        let flat = dataset(&[(&[0.1, 0.9], &[0.4, 0.4])]);
        assert!(matches!(recovery(&flat), Err(AuditError::DegenerateDenominator(_))));
    }

    #[test]
    fn recovery_can_be_negative() {
        let inverted = dataset(&[(&[0.9, 0.1], &[0.0, 1.0])]);
        assert_eq!(recovery(&inverted).unwrap(), -1.0);
    }

    #[test]
    fn top1_cases() {
        assert_eq!(top1_accuracy(&d2()).unwrap(), 0.25);
        assert_eq!(top1_accuracy(&d1()).unwrap(), 0.5);
        let same = dataset(&[(&[0.1, 0.9, 0.4], &[0.1, 0.9, 0.4])]);
        assert_eq!(top1_accuracy(&same).unwrap(), 1.0);
    }

    #[test]
    fn tie_cases() {
        let t = tie_diagnostics(&d2());
        assert_eq!(t.judge_pairwise_tie_rate, 1.0);
        assert_eq!(t.top1_margin_tie_rate, 1.0);
        assert_eq!(t.unique_judge_values, 1);
        assert_eq!(t.oracle_pairwise_tie_rate, Some(0.0));
        let t = tie_diagnostics(&d1());
        assert_eq!((t.judge_pairwise_tie_rate, t.top1_margin_tie_rate), (0.0, 0.0));
        assert_eq!(t.oracle_pairwise_tie_rate, Some(0.0));
    }

    #[test]
    fn audit_d1_and_d2() {
        let r = audit(&d1(), None).unwrap();
        assert!(close(r.global_r.value.unwrap(), 0.4472, 1e-4));
        assert!(close(r.within_r.value.unwrap(), 0.4472, 1e-4));
        assert_eq!(r.recovery.value, Some(0.0));
        assert_eq!(r.pcs_n.value, Some(0.5));

        let r = audit(&d2(), None).unwrap();
        assert!(r.within_r.value.is_none());
        assert!(r.within_r.reason.as_deref().unwrap().contains("degenerate judge residual variance"));
        assert!(r.variance_between_judge.value.is_none());
        assert_eq!(r.tau_skipped_prompts, 1);
        assert!(close(r.selection_values.v_judge.value.unwrap(), 0.7425, 1e-15));

        let same = dataset(&[(&[0.1, 0.9, 0.4], &[0.1, 0.9, 0.4]), (&[0.2, 0.3], &[0.2, 0.3])]);
        let r = audit(&same, None).unwrap();
        assert_eq!((r.recovery.value, r.pcs_n.value, r.p_nt.value), (Some(1.0), Some(1.0), Some(1.0)));
        assert!(r.to_markdown().contains("| Recovery rate | 100.0% | --- |"));
    }

    #[test]
    fn audit_rejects_unlabeled() {
        let text = r#"{"prompt_id":"P","candidate_id":"a","judge_score":0.1,"query_prob":0.5}
{"prompt_id":"P","candidate_id":"b","judge_score":0.2,"query_prob":0.5}"#;
        let ds = crate::dataset::parse_pointwise(text, crate::dataset::Format::Jsonl, false).unwrap();
        assert!(matches!(audit(&ds, None), Err(AuditError::Unlabeled { .. })));
        let t = tie_diagnostics(&ds);
        assert_eq!(t.oracle_pairwise_tie_rate, None);
    }

    #[test]
    fn regime_mix_cases() {
        let hard = dataset(&[(&[0.5, 0.6, 0.4], &[0.3, 0.1, 0.6]), (&[0.2, 0.3], &[0.7, 0.5])]);
        let easy = dataset(&[(&[0.0, 1.0], &[0.0, 1.0]), (&[1.0, 0.0], &[1.0, 0.0])]);
        let sweep = regime_mix_sweep(&hard, &easy, &[0.0, 0.5, 1.0]).unwrap();
        let base = audit(&hard, None).unwrap();
        assert_eq!(sweep[0].global_r, base.global_r.value);
        assert_eq!(sweep[0].recovery, base.recovery.value);
        assert!(sweep[2].global_r.unwrap() > sweep[0].global_r.unwrap());

        let copy = regime_mix_sweep(&hard, &hard, &[0.0, 1.0]).unwrap();
        assert!(close(copy[0].global_r.unwrap(), copy[1].global_r.unwrap(), 1e-12));
        assert!(close(copy[0].recovery.unwrap(), copy[1].recovery.unwrap(), 1e-12));
        assert!(regime_mix_sweep(&hard, &easy, &[0.5, 0.0]).is_err());
    }

    fn arb_table() -> impl Strategy<Value = ScoreTable> {
        proptest::collection::vec(
            (2usize..6).prop_flat_map(|n| {
                (
                    proptest::collection::vec(0u8..6, n),
                    proptest::collection::vec(0u8..5, n),
                )
            }),
            2..8,
        )
        .prop_map(|prompts| {
            let sizes: Vec<usize> = prompts.iter().map(|(s, _)| s.len()).collect();
            let judge = prompts.iter().flat_map(|(s, _)| s.iter().map(|&x| x as f64 / 5.0)).collect();
            let oracle = prompts.iter().flat_map(|(_, o)| o.iter().map(|&x| x as f64 / 4.0)).collect();
            ScoreTable::from_parts(&sizes, judge, oracle).unwrap()
        })
    }

    proptest! {
        #[test]
        fn monotone_transform_keeps_decision_metrics(t in arb_table(), a in 0.1f64..5.0, b in -1.0f64..1.0) {
            let f = |s: f64| a * s.powi(3) + a * s + b;
            let u = t.map_judge(f);
            prop_assert_eq!(t.selection_values().v_judge, u.selection_values().v_judge);
            prop_assert_eq!(t.top1_accuracy(), u.top1_accuracy());
            prop_assert_eq!(t.sign_agreement().ok(), u.sign_agreement().ok());
            prop_assert_eq!(t.tie_adjusted_agreement().ok(), u.tie_adjusted_agreement().ok());
            prop_assert_eq!(t.recovery().ok(), u.recovery().ok());
            let tt = t.tie_diagnostics();
            let ut = u.tie_diagnostics();
            prop_assert_eq!(tt.judge_pairwise_tie_rate, ut.judge_pairwise_tie_rate);
            prop_assert_eq!(tt.top1_margin_tie_rate, ut.top1_margin_tie_rate);
            prop_assert_eq!(t.mean_kendall_tau().ok().map(|k| k.mean_tau_b), u.mean_kendall_tau().ok().map(|k| k.mean_tau_b));
        }

        #[test]
        fn pearson_is_affine_invariant(t in arb_table(), a in 0.1f64..10.0, b in -3.0f64..3.0) {
            let u = t.map_judge(|s| a * s + b);
            if let (Ok(r1), Ok(r2)) = (t.global_correlation(), u.global_correlation()) {
                prop_assert!((r1 - r2).abs() < 1e-9);
            }
            if let (Ok(r1), Ok(r2)) = (t.residuals().within_correlation(), u.residuals().within_correlation()) {
                prop_assert!((r1 - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn bounds_and_identities(t in arb_table()) {
            let sv = t.selection_values();
            prop_assert!(sv.v_random <= sv.v_oracle && sv.v_judge <= sv.v_oracle);
            let lo = t.oracle().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = stats::max(t.oracle());
            for v in [sv.v_oracle, sv.v_random, sv.v_judge] {
                prop_assert!(v >= lo && v <= hi);
            }
            if let Ok(rec) = t.recovery() {
                let direct = (sv.v_judge - sv.v_random) / (sv.v_oracle - sv.v_random);
                prop_assert!((rec - direct).abs() <= 1e-12);
            }
            for r in [t.sign_agreement().ok(), t.tie_adjusted_agreement().ok(), Some(t.top1_accuracy())].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&r));
            }
            if let Ok(k) = t.mean_kendall_tau() {
                prop_assert!((-1.0..=1.0).contains(&k.mean_tau_b));
            }
            if let Ok(v) = t.variance_decomposition() {
                prop_assert!((v.between_judge + v.within_judge - 1.0).abs() < 1e-9);
                prop_assert!((v.between_oracle + v.within_oracle - 1.0).abs() < 1e-9);
                // Law of total variance against the pooled population variance.
                prop_assert!((v.total_oracle - stats::pop_variance(t.oracle())).abs() < 1e-9);
                prop_assert!((v.total_judge - stats::pop_variance(t.judge())).abs() < 1e-9);
            }
            let rt = t.residuals();
            for p in 0..t.n_prompts() {
                let s: f64 = rt.rows.iter().filter(|r| r.prompt == p).map(|r| r.judge_residual).sum();
                prop_assert!(s.abs() < 1e-12);
            }
        }
    }
}
