//! C ABI over `judge_audit`.
//!
//! Datasets are opaque handles created by a `ja_*_load` or `ja_*_from_*`
//! function and released with the matching `_free`. Every fallible call
//! returns a [`JaStatus`]; on failure, `ja_last_error()` holds a message for
//! the calling thread until its next failing call. Strings returned through
//! out-parameters are owned by the caller and released with
//! `ja_string_free`. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use judge_audit::calibration::isotonic_fit;
use judge_audit::dataset::{load_pairwise, load_pointwise, load_pointwise_unbounded, Format};
use judge_audit::inference::{dr_recovery, BootstrapConfig, OutcomeModel};
use judge_audit::metrics::{self, ScoreTable};
use judge_audit::routing::{compute_outcomes, route_value, RoutingPolicy};
use judge_audit::{AuditError, PairwiseDataset, PointwiseDataset};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JaStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or an out-of-range argument.
    InvalidArgument = 1,
    NotFound = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    /// A metric is undefined on this input (zero variance, no comparable pairs...).
    Undefined = 6,
    Config = 7,
    Internal = 8,
    Panic = 9,
}

impl From<&AuditError> for JaStatus {
    fn from(e: &AuditError) -> Self {
        match e {
            AuditError::NotFound { .. } => JaStatus::NotFound,
            AuditError::Io { .. } => JaStatus::Io,
            AuditError::Parse { .. } => JaStatus::Parse,
            AuditError::Validation { .. }
            | AuditError::MixedScale { .. }
            | AuditError::Unlabeled { .. }
            | AuditError::UnknownCandidate { .. }
            | AuditError::LengthMismatch { .. }
            | AuditError::Positivity(_) => JaStatus::Validation,
            AuditError::DegenerateVariance(_)
            | AuditError::DegenerateDenominator(_)
            | AuditError::DegenerateInput(_)
            | AuditError::NoComparablePairs(_)
            | AuditError::AllSkipped { .. }
            | AuditError::TooManySkips { .. }
            | AuditError::InsufficientData(_)
            | AuditError::InsufficientSamples(_) => JaStatus::Undefined,
            AuditError::Config(_)
            | AuditError::NoBracket { .. }
            | AuditError::Infeasible(_)
            | AuditError::UnlabeledOracleBest => JaStatus::Config,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

/// Message of the calling thread's last failure, or null. Valid until the
/// next failing call on this thread.
#[no_mangle]
pub extern "C" fn ja_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ja_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

struct Fail(JaStatus, String);

impl From<AuditError> for Fail {
    fn from(e: AuditError) -> Self {
        Fail(JaStatus::from(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(JaStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> JaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => JaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            JaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    out.write(v);
    Ok(())
}

/// Opaque pointwise dataset.
pub struct JaDataset(PointwiseDataset);

/// Opaque pairwise dataset.
pub struct JaPairwise(PairwiseDataset);

/// Loads a pointwise JSONL or CSV file (format from the extension).
/// `unbounded` skips score-scale detection and range checks.
#[no_mangle]
pub unsafe extern "C" fn ja_dataset_load(path: *const c_char, unbounded: bool, out: *mut *mut JaDataset) -> JaStatus {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let format = Format::from_path(path);
        let ds = if unbounded {
            load_pointwise_unbounded(path, format)?
        } else {
            load_pointwise(path, format)?
        };
        write_out(out, Box::into_raw(Box::new(JaDataset(ds))))
    })
}

/// Builds a fully labeled dataset from flat arrays. Prompt `p` owns the next
/// `sizes[p]` entries of `judge` and `oracle`. Scores are not range checked.
#[no_mangle]
pub unsafe extern "C" fn ja_dataset_from_arrays(
    sizes: *const usize,
    n_prompts: usize,
    judge: *const f64,
    oracle: *const f64,
    out: *mut *mut JaDataset,
) -> JaStatus {
    guard(|| {
        let sizes = slice_arg(sizes, n_prompts, "sizes")?;
        let total: usize = sizes.iter().sum();
        let judge = slice_arg(judge, total, "judge")?.to_vec();
        let oracle = slice_arg(oracle, total, "oracle")?.to_vec();
        let table = ScoreTable::from_parts(sizes, judge, oracle)?;
        let ds = judge_audit::simulation::table_to_dataset(&table)?;
        write_out(out, Box::into_raw(Box::new(JaDataset(ds))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ja_dataset_free(ds: *mut JaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ja_dataset_n_prompts(ds: *const JaDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_prompts())
}

#[no_mangle]
pub unsafe extern "C" fn ja_dataset_n_records(ds: *const JaDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_records())
}

/// Judge, random and oracle-best selection values.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JaSelectionValues {
    pub v_oracle: f64,
    pub v_random: f64,
    pub v_judge: f64,
}

#[no_mangle]
pub unsafe extern "C" fn ja_selection_values(ds: *const JaDataset, out: *mut JaSelectionValues) -> JaStatus {
    guard(|| {
        let sv = metrics::selection_values(&ref_arg(ds, "dataset")?.0)?;
        write_out(
            out,
            JaSelectionValues {
                v_oracle: sv.v_oracle,
                v_random: sv.v_random,
                v_judge: sv.v_judge,
            },
        )
    })
}

/// Scalar metrics addressable by [`ja_metric`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JaMetric {
    Recovery = 0,
    Top1Accuracy = 1,
    GlobalCorrelation = 2,
    WithinCorrelation = 3,
    AttenuationSlope = 4,
    SignAgreement = 5,
    TieAdjustedAgreement = 6,
    MeanKendallTau = 7,
}

#[no_mangle]
pub unsafe extern "C" fn ja_metric(ds: *const JaDataset, metric: JaMetric, out: *mut f64) -> JaStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        let v = match metric {
            JaMetric::Recovery => metrics::recovery(ds)?,
            JaMetric::Top1Accuracy => metrics::top1_accuracy(ds)?,
            JaMetric::GlobalCorrelation => metrics::global_correlation(ds)?,
            JaMetric::WithinCorrelation => metrics::within_correlation(&metrics::decompose(ds)?)?,
            JaMetric::AttenuationSlope => metrics::attenuation_slope(&metrics::decompose(ds)?)?,
            JaMetric::SignAgreement => metrics::sign_agreement(ds)?,
            JaMetric::TieAdjustedAgreement => metrics::tie_adjusted_agreement(ds)?,
            JaMetric::MeanKendallTau => metrics::mean_kendall_tau(ds)?.mean_tau_b,
        };
        write_out(out, v)
    })
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(JaStatus::Internal, "string holds NUL".into()))
}

/// Full audit report as JSON. `bootstrap_resamples = 0` skips intervals.
#[no_mangle]
pub unsafe extern "C" fn ja_audit_json(
    ds: *const JaDataset,
    bootstrap_resamples: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> JaStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        let boot = (bootstrap_resamples > 0).then(|| BootstrapConfig::new(bootstrap_resamples, seed));
        if let Some(b) = &boot {
            b.validate()?;
        }
        let report = metrics::audit(ds, boot.as_ref())?;
        let json = serde_json::to_string(&report).map_err(|e| Fail(JaStatus::Internal, e.to_string()))?;
        write_out(out, into_c_string(json)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn ja_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JaOutcomeModel {
    Zero = 0,
    Constant = 1,
    JudgeLinear = 2,
}

/// Doubly robust recovery with its 95% normal interval.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JaInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub std_error: f64,
}

/// Uses `labeled` and `query_prob` from the dataset.
#[no_mangle]
pub unsafe extern "C" fn ja_dr_recovery(ds: *const JaDataset, model: JaOutcomeModel, out: *mut JaInterval) -> JaStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        let model = match model {
            JaOutcomeModel::Zero => OutcomeModel::Zero,
            JaOutcomeModel::Constant => OutcomeModel::Constant,
            JaOutcomeModel::JudgeLinear => OutcomeModel::JudgeLinear,
        };
        let r = dr_recovery(ds, &model, None, None)?;
        write_out(
            out,
            JaInterval {
                point: r.estimate.point,
                lo: r.estimate.lo,
                hi: r.estimate.hi,
                std_error: r.std_error,
            },
        )
    })
}

/// Value of routing prompts to the oracle under `policy` (for example
/// `random`, `low_margin`, `oracle_optimal`) at `budget` in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn ja_route_value(
    ds: *const JaDataset,
    policy: *const c_char,
    budget: f64,
    out: *mut f64,
) -> JaStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        let policy: RoutingPolicy = str_arg(policy, "policy")?.parse()?;
        let outcomes = compute_outcomes(ds)?;
        write_out(out, route_value(&outcomes, &policy, budget)?.value)
    })
}

/// Isotonic (non-decreasing) least-squares fit; writes the fitted value of
/// each input point to `fitted` (length `n`).
#[no_mangle]
pub unsafe extern "C" fn ja_isotonic_fit(scores: *const f64, labels: *const f64, n: usize, fitted: *mut f64) -> JaStatus {
    guard(|| {
        let x = slice_arg(scores, n, "scores")?;
        let y = slice_arg(labels, n, "labels")?;
        if fitted.is_null() && n > 0 {
            return Err(invalid("fitted is null"));
        }
        let cal = isotonic_fit(x, y)?;
        for (i, &s) in x.iter().enumerate() {
            fitted.add(i).write(cal.evaluate(s));
        }
        Ok(())
    })
}

/// Loads a pairwise JSONL or CSV file.
#[no_mangle]
pub unsafe extern "C" fn ja_pairwise_load(path: *const c_char, out: *mut *mut JaPairwise) -> JaStatus {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let pw = load_pairwise(path, Format::from_path(path))?;
        write_out(out, Box::into_raw(Box::new(JaPairwise(pw))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ja_pairwise_free(pw: *mut JaPairwise) {
    if !pw.is_null() {
        drop(Box::from_raw(pw));
    }
}

/// Best-of-2 statistics. `agreement` is NaN when no record is untied on
/// both sides.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JaPairwiseStats {
    pub tie_rate: f64,
    pub agreement: f64,
    pub p_eff: f64,
    pub recovery_bo2: f64,
    pub n_records: usize,
}

#[no_mangle]
pub unsafe extern "C" fn ja_pairwise_stats(pw: *const JaPairwise, out: *mut JaPairwiseStats) -> JaStatus {
    guard(|| {
        let s = judge_audit::pairwise::pairwise_stats(&ref_arg(pw, "pairwise dataset")?.0)?;
        write_out(
            out,
            JaPairwiseStats {
                tie_rate: s.tie_rate,
                agreement: s.agreement.unwrap_or(f64::NAN),
                p_eff: s.p_eff,
                recovery_bo2: s.recovery_bo2,
                n_records: s.n_records,
            },
        )
    })
}
