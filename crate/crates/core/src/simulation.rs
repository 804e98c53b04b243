//! Synthetic generators and the theoretical-baseline experiments built on
//! them.
//!
//! Every prompt draws from its own RNG stream derived from (seed, prompt
//! index), so output does not depend on parallelism, and two configs that
//! differ only in `rho` or `quantize_bins` share their underlying normals.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateRecord, PointwiseDataset, PromptGroup};
use crate::error::{AuditError, Result};
use crate::metrics::ScoreTable;
use crate::stats::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianConfig {
    /// Within-prompt judge/oracle correlation.
    pub rho: f64,
    pub n_candidates: usize,
    pub n_prompts: usize,
    pub seed: u64,
    pub quantize_bins: Option<usize>,
    pub between_sd_judge: f64,
    pub between_sd_oracle: f64,
    pub between_corr: f64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        GaussianConfig {
            rho: 0.5,
            n_candidates: 4,
            n_prompts: 10_000,
            seed: 0,
            quantize_bins: None,
            between_sd_judge: 0.0,
            between_sd_oracle: 0.0,
            between_corr: 0.0,
        }
    }
}

impl GaussianConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AuditError::Config(m.to_string()));
        if !(-1.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [-1, 1]");
        }
        if !(-1.0..=1.0).contains(&self.between_corr) {
            return bad("between_corr must lie in [-1, 1]");
        }
        if self.n_candidates < 2 {
            return bad("n_candidates must be at least 2");
        }
        if self.n_prompts < 1 {
            return bad("n_prompts must be at least 1");
        }
        if matches!(self.quantize_bins, Some(b) if b < 2) {
            return bad("quantize_bins must be at least 2");
        }
        if !(self.between_sd_judge >= 0.0 && self.between_sd_oracle >= 0.0) {
            return bad("between-layer standard deviations must be nonnegative");
        }
        Ok(())
    }
}

/// Draws (judge, oracle) for one prompt.
fn gaussian_prompt(cfg: &GaussianConfig, t: usize, judge: &mut [f64], oracle: &mut [f64]) {
    let mut rng = rng_for(cfg.seed, t as u64);
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let mu_o = cfg.between_sd_oracle * z1;
    let mu_s = cfg.between_sd_judge
        * (cfg.between_corr * z1 + (1.0 - cfg.between_corr * cfg.between_corr).max(0.0).sqrt() * z2);
    let noise = (1.0 - cfg.rho * cfg.rho).max(0.0).sqrt();
    for (s, o) in judge.iter_mut().zip(oracle.iter_mut()) {
        let oi: f64 = rng.sample(StandardNormal);
        let zi: f64 = rng.sample(StandardNormal);
        *s = cfg.rho * oi + noise * zi + mu_s;
        *o = oi + mu_o;
    }
}

/// Maps each value to the midpoint of its bin among `bins` equal-width bins
/// spanning the realized range.
pub fn quantize(values: &mut [f64], bins: usize) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return;
    }
    let width = (hi - lo) / bins as f64;
    for v in values.iter_mut() {
        let k = (((*v - lo) / width) as usize).min(bins - 1);
        *v = lo + (k as f64 + 0.5) * width;
    }
}

/// Fast path: the generated scores as a [`ScoreTable`].
pub fn simulate_table(cfg: &GaussianConfig) -> Result<ScoreTable> {
    cfg.validate()?;
    let n = cfg.n_candidates;
    let mut judge = vec![0.0; n * cfg.n_prompts];
    let mut oracle = vec![0.0; n * cfg.n_prompts];
    judge
        .par_chunks_mut(n)
        .zip(oracle.par_chunks_mut(n))
        .enumerate()
        .for_each(|(t, (s, o))| gaussian_prompt(cfg, t, s, o));
    if let Some(b) = cfg.quantize_bins {
        quantize(&mut judge, b);
    }
    ScoreTable::uniform(n, judge, oracle)
}

/// Generated data as an unbounded dataset with ids `p{t}` / `c{i}`.
pub fn generate_gaussian(cfg: &GaussianConfig) -> Result<PointwiseDataset> {
    let table = simulate_table(cfg)?;
    table_to_dataset(&table)
}

pub fn table_to_dataset(table: &ScoreTable) -> Result<PointwiseDataset> {
    let groups = table
        .prompts()
        .enumerate()
        .map(|(t, (s, o))| {
            let pid = format!("p{t}");
            PromptGroup {
                candidates: s
                    .iter()
                    .zip(o)
                    .enumerate()
                    .map(|(i, (&s, &o))| CandidateRecord::labeled(pid.clone(), format!("c{i}"), s, o))
                    .collect(),
                prompt_id: pid,
            }
        })
        .collect();
    PointwiseDataset::new_unbounded(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rho: f64,
    pub recovery: f64,
    pub within_r: f64,
}

/// Simulated recovery at each rho. Without quantization the theory gives
/// recovery = rho.
pub fn gaussian_recovery_curve(rhos: &[f64], base: &GaussianConfig) -> Result<Vec<CurvePoint>> {
    if base.quantize_bins.is_some() {
        return Err(AuditError::Config("the recovery curve is defined without quantization".into()));
    }
    rhos.iter()
        .map(|&rho| {
            let t = simulate_table(&GaussianConfig { rho, ..base.clone() })?;
            Ok(CurvePoint {
                rho,
                recovery: t.recovery()?,
                within_r: t.residuals().within_correlation()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationPoint {
    /// `None` is the continuous setting.
    pub bins: Option<usize>,
    pub p_eff: f64,
    pub recovery: f64,
}

/// Recovery and p_eff as judge scores are coarsened. `bins` must run from
/// continuous (`None`) down through decreasing bin counts.
pub fn discretization_sweep(base: &GaussianConfig, bins: &[Option<usize>]) -> Result<Vec<DiscretizationPoint>> {
    let key = |b: &Option<usize>| b.unwrap_or(usize::MAX);
    if bins.windows(2).any(|w| key(&w[0]) <= key(&w[1])) {
        return Err(AuditError::Config(
            "bin settings must be strictly decreasing with continuous first".into(),
        ));
    }
    let raw = simulate_table(&GaussianConfig {
        quantize_bins: None,
        ..base.clone()
    })?;
    bins.iter()
        .map(|&b| {
            let t = match b {
                None => raw.clone(),
                Some(k) => {
                    let mut judge = raw.judge().to_vec();
                    quantize(&mut judge, k);
                    raw.with_judge(judge)?
                }
            };
            Ok(DiscretizationPoint {
                bins: b,
                p_eff: t.tie_adjusted_agreement()?,
                recovery: t.recovery()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub target: f64,
    pub rho: f64,
    pub recovery: f64,
    pub p_eff: f64,
}

/// Smallest rho (by bisection, common random numbers across rho) whose
/// simulated recovery is within `tol` of each target.
pub fn recovery_requirements(targets: &[f64], base: &GaussianConfig, tol: f64) -> Result<Vec<Requirement>> {
    if !(tol > 0.0) {
        return Err(AuditError::Config("tolerance must be positive".into()));
    }
    let eval = |rho: f64| -> Result<(f64, f64)> {
        let t = simulate_table(&GaussianConfig { rho, ..base.clone() })?;
        Ok((t.recovery()?, t.tie_adjusted_agreement()?))
    };
    let at_one = eval(1.0)?;
    targets
        .iter()
        .map(|&target| {
            if !(target > 0.0) || target >= 1.0 || at_one.0 < target - tol {
                return Err(AuditError::NoBracket {
                    target,
                    at_one: at_one.0,
                });
            }
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            let mut best = (1.0, at_one);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let r = eval(mid)?;
                if (r.0 - target).abs() <= tol {
                    best = (mid, r);
                    break;
                }
                if r.0 < target {
                    lo = mid;
                } else {
                    hi = mid;
                    best = (mid, r);
                }
            }
            Ok(Requirement {
                target,
                rho: best.0,
                recovery: best.1 .0,
                p_eff: best.1 .1,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedStats {
    pub global_r: f64,
    pub within_r: f64,
    pub recovery: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpPair {
    pub configs: [GaussianConfig; 2],
    pub realized: [RealizedStats; 2],
    /// Population global r implied by each config.
    pub population_r: [f64; 2],
}

/// Population Pearson r over pooled records, within variance 1 per channel.
pub fn population_global_r(cfg: &GaussianConfig) -> f64 {
    let (sj, so) = (cfg.between_sd_judge, cfg.between_sd_oracle);
    (sj * so * cfg.between_corr + cfg.rho) / ((1.0 + sj * sj) * (1.0 + so * so)).sqrt()
}

fn realized(cfg: &GaussianConfig) -> Result<RealizedStats> {
    let t = simulate_table(cfg)?;
    Ok(RealizedStats {
        global_r: t.global_correlation()?,
        within_r: t.residuals().within_correlation()?,
        recovery: t.recovery()?,
    })
}

/// Two DGPs with the same population global r but different within-prompt
/// correlations.
///
/// Within-prompt variance is 1 in both channels. If `base` sets between-layer
/// sds they are kept and only `between_corr` is solved; otherwise both
/// channels get the same between-layer share `w = sd^2 / (1 + sd^2)`, the
/// smallest share for which both correlations are feasible, so that
/// `r = w * between_corr + (1 - w) * rho`.
pub fn nonidentifiability_pair(
    target_r: f64,
    rho_1: f64,
    rho_2: f64,
    base: &GaussianConfig,
) -> Result<DgpPair> {
    if !(target_r > 0.0 && target_r < 1.0) {
        return Err(AuditError::Config("target r must lie in (0, 1)".into()));
    }
    if rho_1 > rho_2 {
        return Err(AuditError::Config("rho_1 must not exceed rho_2".into()));
    }
    let (sj, so) = if base.between_sd_judge > 0.0 && base.between_sd_oracle > 0.0 {
        (base.between_sd_judge, base.between_sd_oracle)
    } else {
        let need = |rho: f64| {
            if target_r > rho {
                (target_r - rho) / (1.0 - rho)
            } else {
                (rho - target_r) / (1.0 + rho)
            }
        };
        let w = need(rho_1).max(need(rho_2));
        if w >= 1.0 {
            return Err(AuditError::Infeasible("no between-layer share reaches the target".into()));
        }
        let sd = if w > 0.0 { (w / (1.0 - w)).sqrt() } else { 0.0 };
        (sd, sd)
    };
    let solve = |rho: f64| -> Result<GaussianConfig> {
        let scale = ((1.0 + sj * sj) * (1.0 + so * so)).sqrt();
        let bc = if sj * so > 0.0 {
            (target_r * scale - rho) / (sj * so)
        } else {
            0.0
        };
        // Minimal-share solutions sit exactly on |bc| = 1 up to rounding.
        let bc = if (bc.abs() - 1.0).abs() < 1e-12 { bc.signum() } else { bc };
        if bc.abs() > 1.0 {
            return Err(AuditError::Infeasible(format!(
                "between-prompt correlation {bc:.4} needed for rho = {rho}"
            )));
        }
        Ok(GaussianConfig {
            rho,
            between_sd_judge: sj,
            between_sd_oracle: so,
            between_corr: bc,
            quantize_bins: None,
            ..base.clone()
        })
    };
    let configs = [solve(rho_1)?, solve(rho_2)?];
    let population_r = [population_global_r(&configs[0]), population_global_r(&configs[1])];
    let realized = [realized(&configs[0])?, realized(&configs[1])?];
    Ok(DgpPair {
        configs,
        realized,
        population_r,
    })
}

/// Prompts whose outcome scale varies, for allocation studies.
///
/// Each prompt has a location `x ~ U(0, 1)` and an outcome scale `oracle_sd`
/// (`high_sd` with probability `high_fraction`, else `low_sd`). Candidates
/// get `O = x + sd * N(0, 1)` and a judge score with within-prompt
/// correlation `rho`. `noise_feature` is independent of everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeteroConfig {
    pub n_prompts: usize,
    pub n_candidates: usize,
    pub rho: f64,
    pub low_sd: f64,
    pub high_sd: f64,
    pub high_fraction: f64,
    pub seed: u64,
}

impl Default for HeteroConfig {
    fn default() -> Self {
        HeteroConfig {
            n_prompts: 1000,
            n_candidates: 4,
            rho: 0.5,
            low_sd: 0.1,
            high_sd: 1.0,
            high_fraction: 0.2,
            seed: 0,
        }
    }
}

pub fn generate_heteroskedastic(cfg: &HeteroConfig) -> Result<PointwiseDataset> {
    if cfg.n_candidates < 2 || cfg.n_prompts == 0 || !(-1.0..=1.0).contains(&cfg.rho) {
        return Err(AuditError::Config("invalid heteroskedastic generator config".into()));
    }
    let noise = (1.0 - cfg.rho * cfg.rho).sqrt();
    let groups: Vec<PromptGroup> = (0..cfg.n_prompts)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(cfg.seed, t as u64);
            let x: f64 = rng.random();
            let sd = if rng.random::<f64>() < cfg.high_fraction { cfg.high_sd } else { cfg.low_sd };
            let noise_feature: f64 = rng.random();
            let features = BTreeMap::from([
                ("noise_feature".to_string(), noise_feature),
                ("oracle_sd".to_string(), sd),
                ("x".to_string(), x),
            ]);
            let pid = format!("p{t}");
            let candidates = (0..cfg.n_candidates)
                .map(|i| {
                    let z: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    let mut rec = CandidateRecord::labeled(
                        pid.clone(),
                        format!("c{i}"),
                        x + sd * (cfg.rho * z + noise * e),
                        x + sd * z,
                    );
                    rec.features = features.clone();
                    rec
                })
                .collect();
            PromptGroup {
                prompt_id: pid,
                candidates,
            }
        })
        .collect();
    PointwiseDataset::new_unbounded(groups)
}

/// Repeated noisy judge samples around a latent judge mean.
///
/// Oracle `O ~ N(0, 1)`; latent judge `L = rho O + sqrt(1 - rho^2) Z`; each
/// of `k_samples` judge samples is `0.5 + judge_scale L + noise_sd N(0, 1)`.
/// The record's `judge_score` is the first sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResampleConfig {
    pub n_prompts: usize,
    pub n_candidates: usize,
    pub k_samples: usize,
    pub rho: f64,
    pub judge_scale: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            n_prompts: 5000,
            n_candidates: 4,
            k_samples: 5,
            rho: 0.3,
            judge_scale: 0.1,
            noise_sd: 0.15,
            seed: 0,
        }
    }
}

pub fn generate_resampled(cfg: &ResampleConfig) -> Result<PointwiseDataset> {
    if cfg.n_candidates < 2 || cfg.k_samples < 1 || cfg.n_prompts == 0 || !(-1.0..=1.0).contains(&cfg.rho) {
        return Err(AuditError::Config("invalid resampling generator config".into()));
    }
    let noise = (1.0 - cfg.rho * cfg.rho).sqrt();
    let groups: Vec<PromptGroup> = (0..cfg.n_prompts)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(cfg.seed, t as u64);
            let pid = format!("p{t}");
            let candidates = (0..cfg.n_candidates)
                .map(|i| {
                    let o: f64 = rng.sample(StandardNormal);
                    let z: f64 = rng.sample(StandardNormal);
                    let latent = 0.5 + cfg.judge_scale * (cfg.rho * o + noise * z);
                    let samples: Vec<f64> = (0..cfg.k_samples)
                        .map(|_| latent + cfg.noise_sd * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let mut rec = CandidateRecord::labeled(pid.clone(), format!("c{i}"), samples[0], o);
                    rec.resample_scores = Some(samples);
                    rec
                })
                .collect();
            PromptGroup {
                prompt_id: pid,
                candidates,
            }
        })
        .collect();
    PointwiseDataset::new_unbounded(groups)
}
