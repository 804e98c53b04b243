//! Cluster bootstrap, AIPW decision values, influence-function recovery
//! intervals, effective sample size and oracle allocation designs.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{PointwiseDataset, PromptGroup};
use crate::error::{AuditError, Result};
use crate::metrics::{judge_pick_value, prompt_average};
use crate::simulation::{self, HeteroConfig};
use crate::stats::{self, mean, percentile_sorted, rng_for};

/// Two-sided normal quantile for 95% intervals.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    /// Lower and upper percentiles, in percent.
    pub interval: [f64; 2],
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            seed: 0,
            interval: [2.5, 97.5],
        }
    }
}

impl BootstrapConfig {
    pub fn new(resamples: usize, seed: u64) -> Self {
        BootstrapConfig {
            resamples,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resamples < 2 {
            return Err(AuditError::Config("bootstrap needs at least 2 resamples".into()));
        }
        let [lo, hi] = self.interval;
        if !(0.0..hi).contains(&lo) || hi > 100.0 {
            return Err(AuditError::Config(format!(
                "invalid percentile interval [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Percentile interval from the defined replicates; `total` counts the
    /// skipped ones too.
    pub(crate) fn percentile_interval(&self, mut values: Vec<f64>, total: usize) -> Result<[f64; 2]> {
        let skipped = total - values.len();
        if values.is_empty() || skipped * 5 > total {
            return Err(AuditError::TooManySkips {
                skipped,
                resamples: total,
            });
        }
        values.sort_by(f64::total_cmp);
        Ok([
            percentile_sorted(&values, self.interval[0] / 100.0),
            percentile_sorted(&values, self.interval[1] / 100.0),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

impl IntervalEstimate {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: IntervalEstimate,
    pub resamples: usize,
    pub skipped: usize,
}

/// Data that can be resampled at the prompt level.
pub trait ClusterSample: Sync {
    fn n_clusters(&self) -> usize;
    fn resample(&self, indices: &[usize]) -> Self
    where
        Self: Sized;
}

impl ClusterSample for PointwiseDataset {
    fn n_clusters(&self) -> usize {
        self.n_prompts()
    }

    fn resample(&self, indices: &[usize]) -> Self {
        self.select(indices)
    }
}

/// Prompt indices for replicate `b`, drawn with replacement.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Evaluates `f` on every replicate. Replicate `b` draws from its own stream,
/// so the output does not depend on the thread count.
pub fn bootstrap_replicates<D, T, F>(data: &D, cfg: &BootstrapConfig, f: F) -> Vec<T>
where
    D: ClusterSample,
    T: Send,
    F: Fn(&D) -> T + Sync,
{
    let n = data.n_clusters();
    (0..cfg.resamples)
        .into_par_iter()
        .map(|b| f(&data.resample(&resample_indices(n, cfg.seed, b))))
        .collect()
}

/// Percentile cluster bootstrap of `statistic`. Replicates where the
/// statistic fails are skipped; more than 20% skipped is an error.
pub fn cluster_bootstrap<D, F>(data: &D, statistic: F, cfg: &BootstrapConfig) -> Result<BootstrapResult>
where
    D: ClusterSample,
    F: Fn(&D) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let point = statistic(data)?;
    let values: Vec<f64> = bootstrap_replicates(data, cfg, |d| statistic(d).ok().filter(|v| v.is_finite()))
        .into_iter()
        .flatten()
        .collect();
    let skipped = cfg.resamples - values.len();
    let [lo, hi] = cfg.percentile_interval(values, cfg.resamples)?;
    Ok(BootstrapResult {
        estimate: IntervalEstimate { point, lo, hi },
        resamples: cfg.resamples,
        skipped,
    })
}

/// Candidate weights for a custom selector.
pub type WeightFn = Arc<dyn Fn(&PromptGroup) -> Vec<f64> + Send + Sync>;
/// Prediction of the selected value for a custom outcome model.
pub type OutcomeFn = Arc<dyn Fn(&Selector, &PromptGroup) -> f64 + Send + Sync>;

/// Per-prompt selection rule whose oracle value is being estimated.
#[derive(Clone)]
pub enum Selector {
    /// Judge argmax, ties broken uniformly (as an expectation).
    Judge,
    /// Uniform over candidates: the prompt's mean oracle value.
    Random,
    /// The prompt's best oracle value; needs an outcome model.
    OracleBest,
    /// Caller-supplied nonnegative candidate weights; the value is the
    /// weighted mean of oracle labels.
    Custom(WeightFn),
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selector::Judge => "Judge",
            Selector::Random => "Random",
            Selector::OracleBest => "OracleBest",
            Selector::Custom(_) => "Custom",
        })
    }
}

impl Selector {
    /// O_delta for a labeled prompt.
    pub fn selected_value(&self, judge: &[f64], oracle: &[f64], group: &PromptGroup) -> Result<f64> {
        Ok(match self {
            Selector::Judge => judge_pick_value(judge, oracle),
            Selector::Random => mean(oracle),
            Selector::OracleBest => stats::max(oracle),
            Selector::Custom(f) => {
                let w = f(group);
                if w.len() != oracle.len() {
                    return Err(AuditError::LengthMismatch {
                        left: w.len(),
                        right: oracle.len(),
                    });
                }
                let total: f64 = w.iter().sum();
                if w.iter().any(|&x| !(x >= 0.0)) || total <= 0.0 {
                    return Err(AuditError::Config(
                        "custom selector weights must be nonnegative with positive sum".into(),
                    ));
                }
                w.iter().zip(oracle).map(|(a, b)| a * b).sum::<f64>() / total
            }
        })
    }

    /// Summary of the judge scores used by the judge-linear outcome model.
    fn judge_summary(&self, judge: &[f64]) -> f64 {
        match self {
            Selector::Random => mean(judge),
            _ => stats::max(judge),
        }
    }
}

/// Outcome regression m(W) for the augmentation term.
#[derive(Clone, Default)]
pub enum OutcomeModel {
    /// m = 0: the estimator is pure inverse-propensity weighting.
    #[default]
    Zero,
    /// Mean of O_delta over labeled prompts.
    Constant,
    /// Least squares of O_delta on a judge-score summary (max S for judge and
    /// oracle-best selection, mean S for random), fit on labeled prompts.
    JudgeLinear,
    Custom(OutcomeFn),
}

impl fmt::Debug for OutcomeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeModel::Zero => "Zero",
            OutcomeModel::Constant => "Constant",
            OutcomeModel::JudgeLinear => "JudgeLinear",
            OutcomeModel::Custom(_) => "Custom",
        })
    }
}

impl std::str::FromStr for OutcomeModel {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(OutcomeModel::Zero),
            "constant" => Ok(OutcomeModel::Constant),
            "judge-linear" | "judge_linear" => Ok(OutcomeModel::JudgeLinear),
            other => Err(AuditError::Config(format!("unknown outcome model {other}"))),
        }
    }
}

impl OutcomeModel {
    pub fn custom(f: impl Fn(&Selector, &PromptGroup) -> f64 + Send + Sync + 'static) -> Self {
        OutcomeModel::Custom(Arc::new(f))
    }

    /// Per-prompt predictions, fitting on labeled prompts where needed.
    pub fn predictions(&self, ds: &PointwiseDataset, selector: &Selector) -> Result<Vec<f64>> {
        let n = ds.n_prompts();
        match self {
            OutcomeModel::Zero => Ok(vec![0.0; n]),
            OutcomeModel::Custom(f) => Ok(ds.groups().iter().map(|g| f(selector, g)).collect()),
            OutcomeModel::Constant | OutcomeModel::JudgeLinear => {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for g in ds.groups() {
                    if let Some(o) = g.oracle_labels() {
                        let s = g.judge_scores();
                        xs.push(selector.judge_summary(&s));
                        ys.push(selector.selected_value(&s, &o, g)?);
                    }
                }
                if ys.is_empty() {
                    return Err(AuditError::InsufficientData(
                        "outcome model needs at least one labeled prompt".into(),
                    ));
                }
                let my = ys.iter().sum::<f64>() / ys.len() as f64;
                if matches!(self, OutcomeModel::Constant) {
                    return Ok(vec![my; n]);
                }
                let mx = xs.iter().sum::<f64>() / xs.len() as f64;
                let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
                let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
                let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
                Ok(ds
                    .groups()
                    .iter()
                    .map(|g| my + slope * (selector.judge_summary(&g.judge_scores()) - mx))
                    .collect())
            }
        }
    }
}

/// Per-prompt query probabilities: the override if given, else `query_prob`,
/// else 1 (fully labeled data without a design).
pub fn propensities(ds: &PointwiseDataset, propensity: Option<&[f64]>) -> Result<Vec<f64>> {
    let probs: Vec<f64> = match propensity {
        Some(p) => {
            if p.len() != ds.n_prompts() {
                return Err(AuditError::LengthMismatch {
                    left: p.len(),
                    right: ds.n_prompts(),
                });
            }
            p.to_vec()
        }
        None => ds.groups().iter().map(|g| g.query_prob().unwrap_or(1.0)).collect(),
    };
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(**p > 0.0 && **p <= 1.0)) {
        return Err(AuditError::Positivity(format!(
            "query probability {p} for prompt {} is outside (0, 1]",
            ds.groups()[i].prompt_id
        )));
    }
    Ok(probs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipwEstimate {
    pub value: f64,
    /// Per-prompt influence values; they average to zero.
    pub influence: Vec<f64>,
}

impl AipwEstimate {
    pub fn std_error(&self) -> f64 {
        let n = self.influence.len() as f64;
        (self.influence.iter().map(|x| x * x).sum::<f64>() / n).sqrt() / n.sqrt()
    }
}

/// AIPW estimate of the decision value of `selector`:
/// mean over prompts of `m + (R / pi) (O_delta - m)`.
///
/// With every prompt labeled at `pi = 1` the result equals the plain
/// per-prompt mean exactly, whatever the outcome model. `model = None` is
/// allowed except for [`Selector::OracleBest`].
pub fn aipw_value(
    ds: &PointwiseDataset,
    selector: &Selector,
    model: Option<&OutcomeModel>,
    propensity: Option<&[f64]>,
) -> Result<AipwEstimate> {
    if model.is_none() && matches!(selector, Selector::OracleBest) {
        return Err(AuditError::UnlabeledOracleBest);
    }
    let probs = propensities(ds, propensity)?;
    let m_hat = model.unwrap_or(&OutcomeModel::Zero).predictions(ds, selector)?;
    let mut terms = Vec::with_capacity(ds.n_prompts());
    for ((g, &pi), &m) in ds.groups().iter().zip(&probs).zip(&m_hat) {
        let term = match g.oracle_labels() {
            Some(o) => {
                let v = selector.selected_value(&g.judge_scores(), &o, g)?;
                let w = 1.0 / pi;
                w * v + (1.0 - w) * m
            }
            None => m,
        };
        terms.push(term);
    }
    let value = prompt_average(&terms);
    Ok(AipwEstimate {
        influence: terms.iter().map(|t| t - value).collect(),
        value,
    })
}

/// Recovery g(psi) = (psi1 - psi0) / (psi2 - psi0) for (random, judge,
/// oracle-best) values.
pub fn recovery_from_values(psi: [f64; 3]) -> f64 {
    (psi[1] - psi[0]) / (psi[2] - psi[0])
}

/// Closed-form gradient of g with respect to (psi0, psi1, psi2):
/// `(psi1 - psi2) / d^2`, `1 / d`, `-(psi1 - psi0) / d^2` with
/// `d = psi2 - psi0`, written through `g` so that `psi1 == psi2` gives
/// exactly cancelling terms.
pub fn recovery_partials(psi: [f64; 3]) -> [f64; 3] {
    let d = psi[2] - psi[0];
    let g = (psi[1] - psi[0]) / d;
    [(g - 1.0) / d, 1.0 / d, -g / d]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrRecovery {
    pub estimate: IntervalEstimate,
    pub std_error: f64,
    /// AIPW values for random, judge and oracle-best selection.
    pub psi: [f64; 3],
    pub psi_std_error: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
}

fn dr_point(
    ds: &PointwiseDataset,
    model: &OutcomeModel,
    propensity: Option<&[f64]>,
) -> Result<([AipwEstimate; 3], f64)> {
    let est = [Selector::Random, Selector::Judge, Selector::OracleBest]
        .map(|s| aipw_value(ds, &s, Some(model), propensity));
    let [a, b, c] = est;
    let est = [a?, b?, c?];
    let psi = [est[0].value, est[1].value, est[2].value];
    if (psi[2] - psi[0]).abs() <= 1e-9 {
        return Err(AuditError::DegenerateDenominator(
            "estimated oracle-best and random values coincide".into(),
        ));
    }
    Ok((est, recovery_from_values(psi)))
}

/// Doubly robust recovery with a normal interval from the combined influence
/// function. A bootstrap config adds a cluster-bootstrap cross-check.
pub fn dr_recovery(
    ds: &PointwiseDataset,
    model: &OutcomeModel,
    propensity: Option<&[f64]>,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<DrRecovery> {
    let (est, point) = dr_point(ds, model, propensity)?;
    let psi = [est[0].value, est[1].value, est[2].value];
    let grad = recovery_partials(psi);
    let n = ds.n_prompts() as f64;
    let phi_sq: f64 = (0..ds.n_prompts())
        .map(|t| {
            let phi = grad[0] * est[0].influence[t] + grad[1] * est[1].influence[t] + grad[2] * est[2].influence[t];
            phi * phi
        })
        .sum();
    let se = (phi_sq / n).sqrt() / n.sqrt();
    let boot = match bootstrap {
        Some(cfg) => {
            let probs = propensities(ds, propensity)?;
            let indexed = PropensityData { ds, probs: &probs };
            Some(cluster_bootstrap(
                &IndexedSample::new(indexed.ds.n_prompts()),
                |idx: &IndexedSample| {
                    let sub = indexed.ds.select(&idx.indices);
                    let p: Vec<f64> = idx.indices.iter().map(|&i| indexed.probs[i]).collect();
                    dr_point(&sub, model, Some(&p)).map(|(_, r)| r)
                },
                cfg,
            )?)
        }
        None => None,
    };
    Ok(DrRecovery {
        estimate: IntervalEstimate {
            point,
            lo: point - Z_95 * se,
            hi: point + Z_95 * se,
        },
        std_error: se,
        psi,
        psi_std_error: [est[0].std_error(), est[1].std_error(), est[2].std_error()],
        bootstrap: boot,
    })
}

struct PropensityData<'a> {
    ds: &'a PointwiseDataset,
    probs: &'a [f64],
}

/// A resample expressed as prompt indices into some external table.
#[derive(Debug, Clone)]
pub struct IndexedSample {
    pub indices: Vec<usize>,
}

impl IndexedSample {
    pub fn new(n: usize) -> Self {
        IndexedSample {
            indices: (0..n).collect(),
        }
    }
}

impl ClusterSample for IndexedSample {
    fn n_clusters(&self) -> usize {
        self.indices.len()
    }

    fn resample(&self, indices: &[usize]) -> Self {
        IndexedSample {
            indices: indices.iter().map(|&i| self.indices[i]).collect(),
        }
    }
}

/// (sum w)^2 / sum w^2 over labeled prompts, w = 1 / pi.
pub fn effective_sample_size(ds: &PointwiseDataset) -> Result<f64> {
    let probs = propensities(ds, None)?;
    let weights: Vec<f64> = ds
        .groups()
        .iter()
        .zip(&probs)
        .filter(|(g, _)| g.is_labeled())
        .map(|(_, p)| 1.0 / p)
        .collect();
    ess_of_weights(&weights)
}

pub fn ess_of_weights(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(AuditError::InsufficientData("no labeled prompts".into()));
    }
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    Ok(s * s / s2)
}

/// Lower bound on query probabilities produced by allocation designs.
pub const MIN_PROB: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Uniform,
    MarginRanked,
    Neyman,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationDesign {
    pub probs: Vec<f64>,
    pub budget: f64,
    pub kind: DesignKind,
}

impl AllocationDesign {
    pub fn uniform(n: usize, budget: f64) -> Result<Self> {
        check_budget(budget)?;
        Ok(AllocationDesign {
            probs: vec![budget; n],
            budget,
            kind: DesignKind::Uniform,
        })
    }

    /// Validates caller-supplied probabilities.
    pub fn custom(probs: Vec<f64>, budget: f64) -> Result<Self> {
        check_budget(budget)?;
        if probs.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(AuditError::Positivity("design probabilities must lie in (0, 1]".into()));
        }
        if mean(&probs) > budget + 1e-9 {
            return Err(AuditError::Config("design exceeds its budget".into()));
        }
        Ok(AllocationDesign {
            probs,
            budget,
            kind: DesignKind::Custom,
        })
    }

    /// Query probability decreasing in the judge's top-1 margin: weights are
    /// ranks (smallest margin gets weight n), then scaled like Neyman.
    pub fn margin_ranked(margins: &[f64], budget: f64) -> Result<Self> {
        let mut order: Vec<usize> = (0..margins.len()).collect();
        order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(a.cmp(&b)));
        let mut weights = vec![0.0; margins.len()];
        for (rank, &i) in order.iter().enumerate() {
            weights[i] = (rank + 1) as f64;
        }
        let mut d = neyman_allocation(&weights, budget)?;
        d.kind = DesignKind::MarginRanked;
        Ok(d)
    }
}

fn check_budget(b: f64) -> Result<()> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(AuditError::Config(format!("budget {b} outside (0, 1]")));
    }
    if b < MIN_PROB {
        return Err(AuditError::Config(format!("budget {b} below the probability floor {MIN_PROB}")));
    }
    Ok(())
}

/// pi_i = clamp(lambda * sd_i, MIN_PROB, 1) with lambda chosen so that the
/// mean of pi equals the budget.
pub fn neyman_allocation(conditional_sd: &[f64], budget: f64) -> Result<AllocationDesign> {
    check_budget(budget)?;
    if conditional_sd.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(AuditError::DegenerateInput("standard deviations must be finite and nonnegative".into()));
    }
    if conditional_sd.iter().sum::<f64>() <= 0.0 {
        return Err(AuditError::DegenerateInput("all conditional standard deviations are zero".into()));
    }
    let n = conditional_sd.len() as f64;
    let target = budget * n;
    let probs_at = |lambda: f64| -> Vec<f64> {
        conditional_sd
            .iter()
            .map(|s| (lambda * s).clamp(MIN_PROB, 1.0))
            .collect()
    };
    let n_zero = conditional_sd.iter().filter(|s| **s == 0.0).count();
    let max_mass = (conditional_sd.len() - n_zero) as f64 + MIN_PROB * n_zero as f64;
    let probs = if max_mass <= target {
        // Every informative prompt is certain; spread the rest evenly.
        let fill = ((target - (conditional_sd.len() - n_zero) as f64) / n_zero as f64).clamp(MIN_PROB, 1.0);
        conditional_sd.iter().map(|&s| if s > 0.0 { 1.0 } else { fill }).collect()
    } else {
        let min_pos = conditional_sd
            .iter()
            .copied()
            .filter(|s| *s > 0.0)
            .fold(f64::INFINITY, f64::min);
        let (mut lo, mut hi) = (0.0, 1.0 / min_pos);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if probs_at(mid).iter().sum::<f64>() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let approx = probs_at(0.5 * (lo + hi));
        // Solve exactly for lambda given which prompts sit at a bound.
        let (mut fixed, mut free_sd) = (0.0, 0.0);
        for (p, s) in approx.iter().zip(conditional_sd) {
            if *p >= 1.0 || *p <= MIN_PROB {
                fixed += p;
            } else {
                free_sd += s;
            }
        }
        if free_sd > 0.0 {
            let lambda = (target - fixed) / free_sd;
            approx
                .iter()
                .zip(conditional_sd)
                .map(|(p, s)| if *p >= 1.0 || *p <= MIN_PROB { *p } else { (lambda * s).clamp(MIN_PROB, 1.0) })
                .collect()
        } else {
            approx
        }
    };
    Ok(AllocationDesign {
        probs,
        budget,
        kind: DesignKind::Neyman,
    })
}

/// Replaces labels by a query mask: prompt `i` keeps its labels iff
/// `mask[i]`, and every record gets `query_prob = probs[i]`.
pub fn apply_label_mask(ds: &PointwiseDataset, mask: &[bool], probs: &[f64]) -> Result<PointwiseDataset> {
    if mask.len() != ds.n_prompts() || probs.len() != ds.n_prompts() {
        return Err(AuditError::LengthMismatch {
            left: mask.len().min(probs.len()),
            right: ds.n_prompts(),
        });
    }
    let groups = ds
        .groups()
        .iter()
        .zip(mask.iter().zip(probs))
        .map(|(g, (&keep, &p))| {
            let mut g = g.clone();
            for c in &mut g.candidates {
                if !keep {
                    c.oracle_label = None;
                }
                c.labeled = keep && c.oracle_label.is_some();
                c.query_prob = Some(p);
            }
            g
        })
        .collect();
    if ds.is_unbounded() {
        PointwiseDataset::new_unbounded(groups)
    } else {
        PointwiseDataset::new(groups)
    }
}

/// Bernoulli(pi) mask driven by shared uniforms `u`.
pub fn bernoulli_mask(u: &[f64], probs: &[f64]) -> Vec<bool> {
    u.iter().zip(probs).map(|(u, p)| u < p).collect()
}

/// How a study design derives query probabilities from a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "feature")]
pub enum DesignSpec {
    Uniform,
    /// Neyman allocation proportional to a prompt-level feature.
    NeymanFeature(String),
    MarginRanked,
}

impl DesignSpec {
    pub fn label(&self) -> String {
        match self {
            DesignSpec::Uniform => "uniform".into(),
            DesignSpec::NeymanFeature(f) => format!("neyman:{f}"),
            DesignSpec::MarginRanked => "margin_ranked".into(),
        }
    }

    pub fn build(&self, ds: &PointwiseDataset, budget: f64) -> Result<AllocationDesign> {
        match self {
            DesignSpec::Uniform => AllocationDesign::uniform(ds.n_prompts(), budget),
            DesignSpec::NeymanFeature(name) => {
                let sd: Option<Vec<f64>> = ds.groups().iter().map(|g| g.feature_mean(name)).collect();
                let sd = sd.ok_or_else(|| AuditError::Config(format!("feature {name} missing on some prompt")))?;
                neyman_allocation(&sd, budget)
            }
            DesignSpec::MarginRanked => {
                let margins: Vec<f64> = ds.groups().iter().map(|g| stats::top1_margin(&g.judge_scores())).collect();
                AllocationDesign::margin_ranked(&margins, budget)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignVariance {
    pub design: String,
    pub mean_recovery: f64,
    pub variance: f64,
    pub variance_ratio: f64,
    pub mean_ess: f64,
}

/// Variance of the DR recovery point estimate under each design, relative to
/// uniform allocation at the same budget. Each trial regenerates data; all
/// designs in a trial share the same uniforms for their Bernoulli masks.
pub fn allocation_variance_study(
    generator: &HeteroConfig,
    designs: &[DesignSpec],
    budget: f64,
    model: &OutcomeModel,
    trials: usize,
    seed: u64,
) -> Result<Vec<DesignVariance>> {
    if trials < 50 {
        return Err(AuditError::Config("allocation study needs at least 50 trials".into()));
    }
    let mut all = vec![DesignSpec::Uniform];
    all.extend(designs.iter().filter(|d| **d != DesignSpec::Uniform).cloned());
    let per_trial: Vec<Result<Vec<(f64, f64)>>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let cfg = HeteroConfig {
                seed: stats::mix_seed(seed, t as u64),
                ..generator.clone()
            };
            let ds = simulation::generate_heteroskedastic(&cfg)?;
            let mut rng = rng_for(seed ^ 0xA110_CA7E, t as u64);
            let u: Vec<f64> = (0..ds.n_prompts()).map(|_| rng.random::<f64>()).collect();
            all.iter()
                .map(|d| {
                    let design = d.build(&ds, budget)?;
                    let mask = bernoulli_mask(&u, &design.probs);
                    let masked = apply_label_mask(&ds, &mask, &design.probs)?;
                    let r = dr_point(&masked, model, None)?.1;
                    Ok((r, effective_sample_size(&masked).unwrap_or(0.0)))
                })
                .collect()
        })
        .collect();
    let per_trial: Vec<Vec<(f64, f64)>> = per_trial.into_iter().collect::<Result<_>>()?;
    let mut out: Vec<DesignVariance> = all
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let rs: Vec<f64> = per_trial.iter().map(|t| t[k].0).collect();
            let m = rs.iter().sum::<f64>() / rs.len() as f64;
            let var = rs.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (rs.len() - 1) as f64;
            DesignVariance {
                design: d.label(),
                mean_recovery: m,
                variance: var,
                variance_ratio: f64::NAN,
                mean_ess: per_trial.iter().map(|t| t[k].1).sum::<f64>() / trials as f64,
            }
        })
        .collect();
    let base = out[0].variance;
    for d in &mut out {
        d.variance_ratio = d.variance / base;
    }
    if !designs.contains(&DesignSpec::Uniform) {
        out.remove(0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CandidateRecord, Format};
    use crate::metrics::ScoreTable;
    use proptest::prelude::*;

    fn dataset(prompts: &[(&[f64], &[f64])]) -> PointwiseDataset {
        let groups = prompts
            .iter()
            .enumerate()
            .map(|(p, (s, o))| PromptGroup {
                prompt_id: format!("P{p}"),
                candidates: s
                    .iter()
                    .zip(o.iter())
                    .enumerate()
                    .map(|(i, (&s, &o))| CandidateRecord::labeled(format!("P{p}"), format!("c{i}"), s, o))
                    .collect(),
            })
            .collect();
        PointwiseDataset::new_unbounded(groups).unwrap()
    }

    fn d1() -> PointwiseDataset {
        dataset(&[(&[0.8, 0.2], &[1.0, 0.0]), (&[0.6, 0.4], &[0.0, 1.0])])
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let ds = d1();
        let cfg = BootstrapConfig::new(200, 7);
        let r = cluster_bootstrap(&ds, |_| Ok(0.3), &cfg).unwrap();
        assert_eq!((r.estimate.lo, r.estimate.hi), (0.3, 0.3));
        let table = ScoreTable::from_dataset(&ds).unwrap();
        let f = |t: &ScoreTable| Ok(t.selection_values().v_random + t.oracle()[0]);
        let a = cluster_bootstrap(&table, f, &cfg).unwrap();
        let b = cluster_bootstrap(&table, f, &cfg).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| cluster_bootstrap(&table, f, &cfg).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn bootstrap_skip_policy() {
        let ds = d1();
        let cfg = BootstrapConfig::new(100, 1);
        // Undefined whenever prompt P0 is absent: about a quarter of resamples.
        let r = cluster_bootstrap(
            &ds,
            |d: &PointwiseDataset| {
                if d.groups().iter().any(|g| g.prompt_id == "P0") {
                    Ok(1.0)
                } else {
                    Err(AuditError::DegenerateInput("x".into()))
                }
            },
            &cfg,
        );
        assert!(matches!(r, Err(AuditError::TooManySkips { .. })));
        assert!(BootstrapConfig::new(1, 0).validate().is_err());
    }

    #[test]
    fn aipw_reduces_to_plain_mean() {
        let ds = d1();
        let e = aipw_value(&ds, &Selector::Judge, None, None).unwrap();
        assert_eq!(e.value, 0.5);
        let c = aipw_value(&ds, &Selector::Judge, Some(&OutcomeModel::custom(|_, _| 17.0)), None).unwrap();
        assert_eq!(c.value, 0.5);
        assert!(matches!(
            aipw_value(&ds, &Selector::OracleBest, None, None),
            Err(AuditError::UnlabeledOracleBest)
        ));
        assert_eq!(aipw_value(&ds, &Selector::OracleBest, Some(&OutcomeModel::Zero), None).unwrap().value, 1.0);
    }

    #[test]
    fn aipw_weights_labeled_prompts() {
        let text = r#"{"prompt_id":"a","candidate_id":"1","judge_score":0.9,"oracle_label":0.8,"query_prob":0.5}
{"prompt_id":"a","candidate_id":"2","judge_score":0.1,"oracle_label":0.2,"query_prob":0.5}
{"prompt_id":"b","candidate_id":"1","judge_score":0.9,"query_prob":0.5}
{"prompt_id":"b","candidate_id":"2","judge_score":0.1,"query_prob":0.5}"#;
        let ds = crate::dataset::parse_pointwise(text, Format::Jsonl, false).unwrap();
        // IPW: (0.8 / 0.5 + 0) / 2.
        let e = aipw_value(&ds, &Selector::Judge, None, None).unwrap();
        assert!((e.value - 0.8).abs() < 1e-15);
        // m = 0.6: a -> 0.6 + 2 (0.8 - 0.6) = 1.0, b -> 0.6.
        let m = OutcomeModel::custom(|_, _| 0.6);
        let e = aipw_value(&ds, &Selector::Judge, Some(&m), None).unwrap();
        assert!((e.value - 0.8).abs() < 1e-15);
        assert!(matches!(
            aipw_value(&ds, &Selector::Judge, None, Some(&[0.5, 0.0])),
            Err(AuditError::Positivity(_))
        ));
        assert_eq!(effective_sample_size(&ds).unwrap(), 1.0);
    }

    #[test]
    fn custom_selector() {
        let ds = d1();
        let first = Selector::Custom(Arc::new(|g: &PromptGroup| {
            let mut w = vec![0.0; g.len()];
            w[0] = 1.0;
            w
        }));
        assert_eq!(aipw_value(&ds, &first, None, None).unwrap().value, 0.5);
    }

    #[test]
    fn dr_recovery_fully_labeled() {
        let r = dr_recovery(&d1(), &OutcomeModel::JudgeLinear, None, None).unwrap();
        assert_eq!(r.estimate.point, 0.0);
        let same = dataset(&[(&[0.1, 0.9, 0.4], &[0.1, 0.9, 0.4]), (&[0.2, 0.3], &[0.2, 0.3]), (&[0.7, 0.5], &[0.7, 0.5])]);
        let r = dr_recovery(&same, &OutcomeModel::Zero, None, Some(&BootstrapConfig::new(50, 3))).unwrap();
        assert_eq!(r.estimate.point, 1.0);
        assert_eq!(r.estimate.width(), 0.0);
        let b = r.bootstrap.unwrap().estimate;
        assert_eq!((b.lo, b.hi), (1.0, 1.0));
        let flat = dataset(&[(&[0.1, 0.9], &[0.4, 0.4])]);
        assert!(matches!(dr_recovery(&flat, &OutcomeModel::Zero, None, None), Err(AuditError::DegenerateDenominator(_))));
    }

    #[test]
    fn ess_cases() {
        assert_eq!(ess_of_weights(&[1.0; 7]).unwrap(), 7.0);
        assert_eq!(ess_of_weights(&[3.0, 3.0]).unwrap(), 2.0);
        assert!((ess_of_weights(&[1.0, 1.0, 2.0]).unwrap() - 16.0 / 6.0).abs() < 1e-15);
        assert_eq!(effective_sample_size(&d1()).unwrap(), 2.0);
    }

    #[test]
    fn neyman_cases() {
        let d = neyman_allocation(&[1.0, 1.0, 1.0], 0.4).unwrap();
        assert!(d.probs.iter().all(|p| (p - 0.4).abs() < 1e-12));
        let d = neyman_allocation(&[2.0, 1.0, 1.0], 0.5).unwrap();
        for (p, e) in d.probs.iter().zip([0.75, 0.375, 0.375]) {
            assert!((p - e).abs() < 1e-12);
        }
        let d = neyman_allocation(&[10.0, 1.0, 1.0], 0.5).unwrap();
        for (p, e) in d.probs.iter().zip([1.0, 0.25, 0.25]) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!(matches!(neyman_allocation(&[0.0, 0.0], 0.5), Err(AuditError::DegenerateInput(_))));
        let d = neyman_allocation(&[1.0, 0.0], 1.0).unwrap();
        assert_eq!(d.probs, vec![1.0, 1.0]);
    }

    #[test]
    fn masking_strips_labels() {
        let m = apply_label_mask(&d1(), &[true, false], &[0.5, 0.5]).unwrap();
        assert!(m.is_partial());
        assert!(m.groups()[1].oracle_labels().is_none());
        assert_eq!(m.groups()[0].query_prob(), Some(0.5));
    }

    proptest! {
        #[test]
        fn partials_match_finite_differences(p0 in -2.0f64..2.0, p1 in -2.0f64..2.0, gap in 0.1f64..2.0, sign in proptest::bool::ANY) {
            let p2 = if sign { p0 + gap } else { p0 - gap };
            let psi = [p0, p1, p2];
            let grad = recovery_partials(psi);
            for k in 0..3 {
                let h = 1e-5 * (1.0 + psi[k].abs());
                let mut up = psi;
                let mut dn = psi;
                up[k] += h;
                dn[k] -= h;
                let fd = (recovery_from_values(up) - recovery_from_values(dn)) / (2.0 * h);
                prop_assert!((grad[k] - fd).abs() <= 1e-6 * grad[k].abs().max(1e-3));
            }
        }

        #[test]
        fn neyman_meets_budget(sd in proptest::collection::vec(0.0f64..10.0, 1..40), b in 0.01f64..1.0) {
            prop_assume!(sd.iter().sum::<f64>() > 0.0);
            let d = neyman_allocation(&sd, b).unwrap();
            let m = d.probs.iter().sum::<f64>() / d.probs.len() as f64;
            let reachable = sd.iter().map(|s| if *s > 0.0 { 1.0 } else { MIN_PROB }).sum::<f64>() / sd.len() as f64;
            if b <= reachable && b >= MIN_PROB {
                prop_assert!((m - b).abs() < 1e-9, "mean {} budget {}", m, b);
            }
            prop_assert!(d.probs.iter().all(|p| *p > 0.0 && *p <= 1.0));
        }

        #[test]
        fn ess_bounded_by_count(w in proptest::collection::vec(1.0f64..50.0, 1..30)) {
            let e = ess_of_weights(&w).unwrap();
            prop_assert!(e <= w.len() as f64 + 1e-9);
            if w.iter().all(|x| *x == w[0]) {
                prop_assert!((e - w.len() as f64).abs() < 1e-9);
            } else {
                prop_assert!(e < w.len() as f64);
            }
        }
    }
}
