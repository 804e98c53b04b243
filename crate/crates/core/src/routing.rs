//! Oracle routing under a query budget: which prompts to send to the oracle
//! instead of trusting the judge's pick.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::PointwiseDataset;
use crate::error::{AuditError, Result};
use crate::metrics::{judge_pick_value, top1_hit};
use crate::stats::{self, mean, rng_for};

/// What routing one prompt to the oracle is worth, plus observable features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedOutcome {
    pub prompt_id: String,
    /// Oracle value of the judge's pick (tie-set expectation).
    pub y1: f64,
    /// Oracle value of the best candidate.
    pub y2: f64,
    pub gain: f64,
    /// Probability the judge's pick attains the oracle maximum.
    pub p_correct: f64,
    pub margin: f64,
    pub mean_level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resample_std: Option<f64>,
    /// Prompt-level means of record features.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, f64>,
}

impl RoutedOutcome {
    /// A named observable: `margin`, `mean_level`, `ci_width`,
    /// `resample_std`, or a record feature.
    pub fn feature(&self, name: &str) -> Option<f64> {
        match name {
            "margin" => Some(self.margin),
            "mean_level" => Some(self.mean_level),
            "ci_width" => self.ci_width,
            "resample_std" => self.resample_std,
            other => self.features.get(other).copied(),
        }
    }

    pub fn p_wrong(&self) -> f64 {
        1.0 - self.p_correct
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn compute_outcomes(ds: &PointwiseDataset) -> Result<Vec<RoutedOutcome>> {
    ds.require_labeled()?;
    Ok(ds
        .groups()
        .iter()
        .map(|g| {
            let s = g.judge_scores();
            let o = g.oracle_labels().expect("labeled");
            let y1 = judge_pick_value(&s, &o);
            let y2 = stats::max(&o);
            let ci: Option<Vec<f64>> = g
                .candidates
                .iter()
                .map(|c| Some(c.ci_high? - c.ci_low?))
                .collect();
            let rs: Option<Vec<f64>> = g
                .candidates
                .iter()
                .map(|c| c.resample_scores.as_deref().map(sample_std))
                .collect();
            let mut names: Vec<&String> = g.candidates.iter().flat_map(|c| c.features.keys()).collect();
            names.sort();
            names.dedup();
            RoutedOutcome {
                prompt_id: g.prompt_id.clone(),
                y1,
                y2,
                gain: (y2 - y1).max(0.0),
                p_correct: top1_hit(&s, &o),
                margin: stats::top1_margin(&s),
                mean_level: mean(&s),
                ci_width: ci.map(|v| mean(&v)),
                resample_std: rs.map(|v| mean(&v)),
                features: names
                    .into_iter()
                    .filter_map(|n| Some((n.clone(), g.feature_mean(n)?)))
                    .collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RoutingPolicy {
    /// Uniformly random subset; `seed: None` reports the exact expectation.
    Random { seed: Option<u64> },
    RankBy { feature: String, ascending: bool },
    /// Ranks by realized gain. An upper bound, not a deployable policy.
    OracleOptimal,
}

impl RoutingPolicy {
    pub fn low_margin() -> Self {
        RoutingPolicy::RankBy {
            feature: "margin".into(),
            ascending: true,
        }
    }

    /// Low judge level first, the two-signal router's dominant direction.
    pub fn low_mean_level() -> Self {
        RoutingPolicy::RankBy {
            feature: "mean_level".into(),
            ascending: true,
        }
    }

    pub fn wide_ci() -> Self {
        RoutingPolicy::RankBy {
            feature: "ci_width".into(),
            ascending: false,
        }
    }

    pub fn high_resample_std() -> Self {
        RoutingPolicy::RankBy {
            feature: "resample_std".into(),
            ascending: false,
        }
    }

    pub fn is_upper_bound(&self) -> bool {
        matches!(self, RoutingPolicy::OracleOptimal)
    }
}

impl fmt::Display for RoutingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingPolicy::Random { seed: None } => write!(f, "random"),
            RoutingPolicy::Random { seed: Some(s) } => write!(f, "random:{s}"),
            RoutingPolicy::RankBy { feature, ascending: true } => write!(f, "low_{feature}"),
            RoutingPolicy::RankBy { feature, ascending: false } => write!(f, "high_{feature}"),
            RoutingPolicy::OracleOptimal => write!(f, "oracle_optimal"),
        }
    }
}

impl std::str::FromStr for RoutingPolicy {
    type Err = AuditError;

    /// `random`, `random:SEED`, `oracle_optimal`, `low_FEATURE`,
    /// `high_FEATURE`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "random" {
            return Ok(RoutingPolicy::Random { seed: None });
        }
        if s == "oracle_optimal" {
            return Ok(RoutingPolicy::OracleOptimal);
        }
        if let Some(seed) = s.strip_prefix("random:") {
            return seed
                .parse()
                .map(|seed| RoutingPolicy::Random { seed: Some(seed) })
                .map_err(|_| AuditError::Config(format!("bad random seed in policy {s}")));
        }
        for (prefix, ascending) in [("low_", true), ("high_", false)] {
            if let Some(feature) = s.strip_prefix(prefix).filter(|f| !f.is_empty()) {
                return Ok(RoutingPolicy::RankBy {
                    feature: feature.to_string(),
                    ascending,
                });
            }
        }
        Err(AuditError::Config(format!("unknown routing policy {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResult {
    pub policy: String,
    pub budget: f64,
    pub queried: usize,
    pub value: f64,
    pub lift_vs_random: f64,
    pub pct_of_optimal: Option<f64>,
}

/// Number of prompts routed at budget `b`.
pub fn budget_count(n: usize, b: f64) -> usize {
    ((b * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Indices of prompts routed under `policy`.
fn select(outcomes: &[RoutedOutcome], policy: &RoutingPolicy, k: usize) -> Result<Vec<usize>> {
    let n = outcomes.len();
    let mut idx: Vec<usize> = (0..n).collect();
    match policy {
        RoutingPolicy::Random { seed: Some(seed) } => {
            idx.shuffle(&mut rng_for(*seed, 0));
        }
        RoutingPolicy::Random { seed: None } => unreachable!("expectation handled by caller"),
        RoutingPolicy::OracleOptimal => {
            idx.sort_by(|&a, &b| {
                outcomes[b]
                    .gain
                    .total_cmp(&outcomes[a].gain)
                    .then_with(|| outcomes[a].prompt_id.cmp(&outcomes[b].prompt_id))
            });
        }
        RoutingPolicy::RankBy { feature, ascending } => {
            let keys: Vec<f64> = outcomes
                .iter()
                .map(|o| {
                    o.feature(feature).ok_or_else(|| {
                        AuditError::InsufficientData(format!(
                            "feature {feature} missing on prompt {}",
                            o.prompt_id
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            idx.sort_by(|&a, &b| {
                let ord = keys[a].total_cmp(&keys[b]);
                let ord = if *ascending { ord } else { ord.reverse() };
                ord.then_with(|| outcomes[a].prompt_id.cmp(&outcomes[b].prompt_id))
            });
        }
    }
    idx.truncate(k);
    Ok(idx)
}

fn routed_value(outcomes: &[RoutedOutcome], chosen: &[usize]) -> f64 {
    let n = outcomes.len() as f64;
    let base: f64 = outcomes.iter().map(|o| o.y1).sum();
    let extra: f64 = chosen.iter().map(|&i| outcomes[i].gain).sum();
    (base + extra) / n
}

/// Value of routing the top `floor(b n)` prompts under `policy`, against the
/// random-routing expectation and the oracle-optimal value at the same count.
pub fn route_value(outcomes: &[RoutedOutcome], policy: &RoutingPolicy, budget: f64) -> Result<RouteResult> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(AuditError::Config(format!("budget {budget} outside [0, 1]")));
    }
    if outcomes.is_empty() {
        return Err(AuditError::InsufficientData("no outcomes to route".into()));
    }
    let n = outcomes.len();
    let k = budget_count(n, budget);
    let mean_y1 = outcomes.iter().map(|o| o.y1).sum::<f64>() / n as f64;
    let mean_gain = outcomes.iter().map(|o| o.gain).sum::<f64>() / n as f64;
    let random = mean_y1 + (k as f64 / n as f64) * mean_gain;
    let value = match policy {
        RoutingPolicy::Random { seed: None } => random,
        p => routed_value(outcomes, &select(outcomes, p, k)?),
    };
    let optimal = routed_value(outcomes, &select(outcomes, &RoutingPolicy::OracleOptimal, k)?);
    let denom = optimal - random;
    let pct_of_optimal = if denom > 1e-15 {
        Some((value - random) / denom)
    } else if k == n && mean_gain > 0.0 {
        Some(1.0)
    } else {
        None
    };
    Ok(RouteResult {
        policy: policy.to_string(),
        budget,
        queried: k,
        value,
        lift_vs_random: value - random,
        pct_of_optimal,
    })
}

/// Every policy at every budget, in row-major (policy, budget) order.
pub fn budget_sweep(outcomes: &[RoutedOutcome], policies: &[RoutingPolicy], budgets: &[f64]) -> Result<Vec<RouteResult>> {
    let mut rows = Vec::with_capacity(policies.len() * budgets.len());
    for p in policies {
        for &b in budgets {
            rows.push(route_value(outcomes, p, b)?);
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv<W: std::io::Write>(rows: &[RouteResult], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "budget", "value", "lift", "pct_of_optimal"])?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.budget.to_string(),
            r.value.to_string(),
            r.lift_vs_random.to_string(),
            r.pct_of_optimal.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainBin {
    pub feature_lo: f64,
    pub feature_hi: f64,
    pub mean_feature: f64,
    pub count: usize,
    pub p_wrong: f64,
    /// Absent when no prompt in the bin can be wrong.
    pub gap_given_wrong: Option<f64>,
    pub mean_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCorrelations {
    pub p_wrong: Option<f64>,
    pub gap_given_wrong: Option<f64>,
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainDecomposition {
    pub feature: String,
    pub bins: Vec<GainBin>,
    pub per_prompt: FactorCorrelations,
    pub bin_level: FactorCorrelations,
}

/// Indices sorted by feature (ties by prompt id) and split into `n_bins`
/// nearly equal-count chunks.
fn equal_count_bins(outcomes: &[RoutedOutcome], keys: &[(usize, f64)], n_bins: usize) -> Vec<Vec<(usize, f64)>> {
    let mut sorted = keys.to_vec();
    sorted.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| outcomes[a.0].prompt_id.cmp(&outcomes[b.0].prompt_id))
    });
    let (q, r) = (sorted.len() / n_bins, sorted.len() % n_bins);
    let mut out = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let len = q + usize::from(b < r);
        out.push(sorted[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Splits E[gain] into P(wrong) and E[gap | wrong] within equal-count bins of
/// `feature`. "Wrong" is `1 - p_correct`, so within a bin
/// `E[gap | wrong] = sum(gain) / sum(1 - p_correct)` and the product
/// identity holds for the sample.
pub fn gain_decomposition(outcomes: &[RoutedOutcome], feature: &str, n_bins: usize) -> Result<GainDecomposition> {
    if n_bins == 0 {
        return Err(AuditError::Config("need at least one bin".into()));
    }
    let keys: Vec<(usize, f64)> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| Some((i, o.feature(feature)?)))
        .collect();
    if keys.len() < 2 * n_bins {
        return Err(AuditError::InsufficientData(format!(
            "feature {feature} present on {} prompts; {} bins need at least {}",
            keys.len(),
            n_bins,
            2 * n_bins
        )));
    }
    let bins: Vec<GainBin> = equal_count_bins(outcomes, &keys, n_bins)
        .into_iter()
        .map(|members| {
            let m = members.len() as f64;
            let wrong: f64 = members.iter().map(|&(i, _)| outcomes[i].p_wrong()).sum();
            let gain: f64 = members.iter().map(|&(i, _)| outcomes[i].gain).sum();
            GainBin {
                feature_lo: members.first().unwrap().1,
                feature_hi: members.last().unwrap().1,
                mean_feature: members.iter().map(|p| p.1).sum::<f64>() / m,
                count: members.len(),
                p_wrong: wrong / m,
                gap_given_wrong: (wrong > 0.0).then(|| gain / wrong),
                mean_gain: gain / m,
            }
        })
        .collect();

    let xs: Vec<f64> = keys.iter().map(|k| k.1).collect();
    let wrong: Vec<f64> = keys.iter().map(|k| outcomes[k.0].p_wrong()).collect();
    let gains: Vec<f64> = keys.iter().map(|k| outcomes[k.0].gain).collect();
    let (gx, gap): (Vec<f64>, Vec<f64>) = keys
        .iter()
        .filter(|k| outcomes[k.0].p_wrong() > 0.0)
        .map(|k| (k.1, outcomes[k.0].gain / outcomes[k.0].p_wrong()))
        .unzip();
    let per_prompt = FactorCorrelations {
        p_wrong: stats::pearson(&xs, &wrong),
        gap_given_wrong: if gx.len() >= 2 { stats::pearson(&gx, &gap) } else { None },
        gain: stats::pearson(&xs, &gains),
    };
    let bx: Vec<f64> = bins.iter().map(|b| b.mean_feature).collect();
    let (bgx, bgap): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .filter_map(|b| Some((b.mean_feature, b.gap_given_wrong?)))
        .unzip();
    let bin_level = FactorCorrelations {
        p_wrong: stats::pearson(&bx, &bins.iter().map(|b| b.p_wrong).collect::<Vec<_>>()),
        gap_given_wrong: if bgx.len() >= 2 { stats::pearson(&bgx, &bgap) } else { None },
        gain: stats::pearson(&bx, &bins.iter().map(|b| b.mean_gain).collect::<Vec<_>>()),
    };
    Ok(GainDecomposition {
        feature: feature.to_string(),
        bins,
        per_prompt,
        bin_level,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiReport {
    /// Set when margins carry no information ("no variance").
    pub flag: Option<String>,
    pub corr_margin_correct: Option<f64>,
    pub corr_margin_gain: Option<f64>,
    /// P(correct | margin) non-decreasing across margin bins.
    pub confidence_calibrated: Option<bool>,
    /// E[gain | margin] non-increasing across margin bins.
    pub voi_calibrated: Option<bool>,
    pub bins: Vec<GainBin>,
}

pub const VOI_BINS: usize = 5;

/// Does the judge's margin track correctness, and does it track the value of
/// querying the oracle?
pub fn voi_diagnostics(outcomes: &[RoutedOutcome]) -> VoiReport {
    let margins: Vec<f64> = outcomes.iter().map(|o| o.margin).collect();
    let degenerate = margins.len() < 2 || margins.iter().all(|&m| m == margins[0]);
    if degenerate {
        return VoiReport {
            flag: Some("margin degenerate: no variance".into()),
            corr_margin_correct: None,
            corr_margin_gain: None,
            confidence_calibrated: None,
            voi_calibrated: None,
            bins: Vec::new(),
        };
    }
    let correct: Vec<f64> = outcomes.iter().map(|o| o.p_correct).collect();
    let gains: Vec<f64> = outcomes.iter().map(|o| o.gain).collect();
    let bins = gain_decomposition(outcomes, "margin", VOI_BINS)
        .map(|d| d.bins)
        .unwrap_or_default();
    let (conf, voi) = if bins.len() == VOI_BINS {
        (
            Some(bins.windows(2).all(|w| w[0].p_wrong >= w[1].p_wrong)),
            Some(bins.windows(2).all(|w| w[0].mean_gain >= w[1].mean_gain)),
        )
    } else {
        (None, None)
    };
    VoiReport {
        flag: None,
        corr_margin_correct: stats::pearson(&margins, &correct),
        corr_margin_gain: stats::pearson(&margins, &gains),
        confidence_calibrated: conf,
        voi_calibrated: voi,
        bins,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveResult {
    pub accuracy_single: f64,
    pub accuracy_adaptive: f64,
    pub accuracy_full: f64,
    pub queries_per_prompt_single: f64,
    pub queries_per_prompt_adaptive: f64,
    pub queries_per_prompt_full: f64,
    /// Share of the single-to-full accuracy gain captured; absent when full
    /// resampling gains nothing.
    pub benefit_fraction: Option<f64>,
    pub cost_fraction: Option<f64>,
}

/// Single pass, then while the top-1 margin is below `margin_threshold`, one
/// more judge sample for each of the current top two (scores become running
/// means), at most `k_max` rounds.
pub fn adaptive_resampling_sim(ds: &PointwiseDataset, margin_threshold: f64, k_max: usize) -> Result<AdaptiveResult> {
    ds.require_labeled()?;
    let mut acc = [0.0f64; 3];
    let mut queries = [0usize; 3];
    for g in ds.groups() {
        let samples: Vec<&[f64]> = g
            .candidates
            .iter()
            .map(|c| {
                c.resample_scores
                    .as_deref()
                    .filter(|s| s.len() > k_max)
                    .ok_or_else(|| {
                        AuditError::InsufficientSamples(format!(
                            "candidate {} of prompt {} needs at least {} resample scores",
                            c.candidate_id,
                            g.prompt_id,
                            k_max + 1
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        let o = g.oracle_labels().expect("labeled");
        let n = samples.len();
        let k_total = samples.iter().map(|s| s.len()).min().unwrap();

        let single: Vec<f64> = samples.iter().map(|s| s[0]).collect();
        let full: Vec<f64> = samples.iter().map(|s| mean(&s[..k_total])).collect();

        let mut sums = single.clone();
        let mut counts = vec![1usize; n];
        let mut spent = n;
        for _ in 0..k_max {
            let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect();
            if stats::top1_margin(&means) >= margin_threshold {
                break;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
            for &i in &order[..2] {
                sums[i] += samples[i][counts[i]];
                counts[i] += 1;
                spent += 1;
            }
        }
        let adaptive: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect();
        acc[0] += top1_hit(&single, &o);
        acc[1] += top1_hit(&adaptive, &o);
        acc[2] += top1_hit(&full, &o);
        queries[0] += n;
        queries[1] += spent;
        queries[2] += n * k_total;
    }
    let m = ds.n_prompts() as f64;
    let [a0, a1, a2] = acc.map(|a| a / m);
    let [q0, q1, q2] = queries.map(|q| q as f64 / m);
    Ok(AdaptiveResult {
        accuracy_single: a0,
        accuracy_adaptive: a1,
        accuracy_full: a2,
        queries_per_prompt_single: q0,
        queries_per_prompt_adaptive: q1,
        queries_per_prompt_full: q2,
        benefit_fraction: (a2 != a0).then(|| (a1 - a0) / (a2 - a0)),
        cost_fraction: (q2 != q0).then(|| (q1 - q0) / (q2 - q0)),
    })
}
