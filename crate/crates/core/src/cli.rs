//! Command-line front end. Every command resolves its configuration from an
//! optional JSON file overlaid with flags, runs, and writes JSON (plus
//! markdown or CSV) carrying the tool version, the resolved config and the
//! SHA-256 of each input.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{calibration_effect, fit_dataset, split_prompts};
use crate::dataset::{parse_pairwise, parse_pointwise, read_input, write_pointwise, Format, PairwiseDataset, PointwiseDataset};
use crate::error::AuditError;
use crate::inference::{
    apply_label_mask, bernoulli_mask, dr_recovery, effective_sample_size, BootstrapConfig, DesignSpec, OutcomeModel,
};
use crate::metrics::audit;
use crate::pairwise::{confidence_calibration, pairwise_stats, preferences_from_pointwise};
use crate::routing::{budget_sweep, compute_outcomes, gain_decomposition, sweep_to_csv, voi_diagnostics, RoutingPolicy};
use crate::simulation::{
    discretization_sweep, gaussian_recovery_curve, generate_gaussian, nonidentifiability_pair, recovery_requirements,
    simulate_table, table_to_dataset, GaussianConfig,
};
use crate::stats::rng_for;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad input, flags or config: exit 2.
    Input(String),
    /// Anything else: exit 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input_err(m: impl Into<String>) -> CliError {
    CliError::Input(m.into())
}

#[derive(Debug, Parser)]
#[command(name = "judge-audit", version, about = "Audit whether judge scores pick the right candidate in best-of-n selection")]
pub struct Cli {
    /// Worker threads for bootstrap and simulation (results do not depend on it).
    #[arg(long, global = true, env = "JUDGE_AUDIT_THREADS")]
    pub threads: Option<usize>,

    /// JSON file with command parameters; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decision-validity audit of a labeled pointwise dataset.
    Audit(AuditArgs),
    /// Best-of-2 statistics and confidence calibration for pairwise judgments.
    Pairwise(PairwiseArgs),
    /// Doubly robust recovery under partial oracle labels.
    Estimate(EstimateArgs),
    /// Synthetic baselines.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Oracle-routing budget sweep.
    Route(RouteArgs),
    /// Isotonic calibration ablation on a seeded prompt split.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Input dataset (JSONL, or CSV by extension).
    pub input: Option<PathBuf>,
    /// Override format detection: jsonl or csv.
    #[arg(long)]
    pub format: Option<Format>,
    /// Skip score-scale detection and range checks (simulated data).
    #[arg(long)]
    pub unbounded: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub io: InputArgs,
    /// Bootstrap resamples for confidence intervals (0 disables).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Bootstrap seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PairwiseArgs {
    #[command(flatten)]
    pub io: InputArgs,
    /// Equal-width bins over [0, 1] for the stated-probability table.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Treat the input as pointwise and derive preferences from score differences.
    #[arg(long)]
    pub from_pointwise: bool,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub io: InputArgs,
    /// observed (query_prob from the file), uniform, margin_ranked or neyman:FEATURE.
    #[arg(long)]
    pub budget_mode: Option<String>,
    /// Label budget for simulated designs, in (0, 1].
    #[arg(long)]
    pub budget: Option<f64>,
    /// zero, constant or judge-linear.
    #[arg(long)]
    pub outcome_model: Option<String>,
    /// Seed for simulated label masks and the bootstrap.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bootstrap resamples for a cross-check interval (0 disables).
    #[arg(long)]
    pub bootstrap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[command(flatten)]
    pub io: InputArgs,
    /// Comma-separated: random, random:SEED, oracle_optimal, low_FEATURE, high_FEATURE.
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<String>>,
    /// Comma-separated budgets in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    /// Margin bins for the gain decomposition.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub io: InputArgs,
    /// Seed for the fit/evaluate prompt split.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Fraction of prompts used to fit the calibrator.
    #[arg(long)]
    pub split_frac: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GaussianArgs {
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub n_candidates: Option<usize>,
    #[arg(long)]
    pub n_prompts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Quantize judge scores into this many equal-width bins.
    #[arg(long)]
    pub quantize_bins: Option<usize>,
    #[arg(long)]
    pub between_sd_judge: Option<f64>,
    #[arg(long)]
    pub between_sd_oracle: Option<f64>,
    #[arg(long)]
    pub between_corr: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Gaussian dataset, optionally with a recovery curve over rho.
    Gaussian {
        #[command(flatten)]
        base: GaussianArgs,
        /// Comma-separated rho values for a recovery curve.
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
    },
    /// Recovery as judge scores are coarsened.
    Discretize {
        #[command(flatten)]
        base: GaussianArgs,
        /// Comma-separated bin counts, `continuous` first.
        #[arg(long, value_delimiter = ',')]
        bin_list: Option<Vec<String>>,
    },
    /// Minimal rho reaching each target recovery.
    Requirements {
        #[command(flatten)]
        base: GaussianArgs,
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<f64>>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Two datasets with equal global r and different within-prompt correlation.
    Nonident {
        #[command(flatten)]
        base: GaussianArgs,
        #[arg(long)]
        target_r: Option<f64>,
        #[arg(long)]
        rho_1: Option<f64>,
        #[arg(long)]
        rho_2: Option<f64>,
    },
}

// Resolved configs. Each is what a JSON config file may contain.

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InputConfig {
    pub input: Option<PathBuf>,
    pub format: Option<Format>,
    pub unbounded: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    #[serde(flatten)]
    pub io: InputConfig,
    pub bootstrap: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PairwiseConfig {
    #[serde(flatten)]
    pub io: InputConfig,
    pub bins: usize,
    pub from_pointwise: bool,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        PairwiseConfig {
            io: InputConfig::default(),
            bins: 5,
            from_pointwise: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    #[serde(flatten)]
    pub io: InputConfig,
    pub budget_mode: String,
    pub budget: Option<f64>,
    pub outcome_model: String,
    pub seed: u64,
    pub bootstrap: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            io: InputConfig::default(),
            budget_mode: "observed".into(),
            budget: None,
            outcome_model: "constant".into(),
            seed: 0,
            bootstrap: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteConfig {
    #[serde(flatten)]
    pub io: InputConfig,
    pub policies: Vec<String>,
    pub budgets: Vec<f64>,
    pub bins: usize,
}

impl Default for RouteConfig {
    fn default() -> Self {
        RouteConfig {
            io: InputConfig::default(),
            policies: vec!["random".into(), "low_margin".into(), "oracle_optimal".into()],
            budgets: vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0],
            bins: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateConfig {
    #[serde(flatten)]
    pub io: InputConfig,
    pub split_seed: u64,
    pub split_frac: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            io: InputConfig::default(),
            split_seed: 0,
            split_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianRunConfig {
    #[serde(flatten)]
    pub base: GaussianConfig,
    pub rhos: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscretizeConfig {
    #[serde(flatten)]
    pub base: GaussianConfig,
    /// `null` is the continuous setting.
    pub bin_list: Vec<Option<usize>>,
}

impl Default for DiscretizeConfig {
    fn default() -> Self {
        DiscretizeConfig {
            base: GaussianConfig::default(),
            bin_list: vec![None, Some(100), Some(20), Some(10), Some(5)],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RequirementsConfig {
    #[serde(flatten)]
    pub base: GaussianConfig,
    pub targets: Vec<f64>,
    pub tol: f64,
}

impl Default for RequirementsConfig {
    fn default() -> Self {
        RequirementsConfig {
            base: GaussianConfig::default(),
            targets: vec![0.5, 0.7, 0.9],
            tol: 0.005,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NonidentConfig {
    #[serde(flatten)]
    pub base: GaussianConfig,
    pub target_r: f64,
    pub rho_1: f64,
    pub rho_2: f64,
}

impl Default for NonidentConfig {
    fn default() -> Self {
        NonidentConfig {
            base: GaussianConfig::default(),
            target_r: 0.47,
            rho_1: 0.0,
            rho_2: 0.6,
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = read_input(path)?;
    serde_json::from_str(&text).map_err(|e| input_err(format!("config {}: {e}", path.display())))
}

fn merge_input(cfg: &mut InputConfig, args: &InputArgs) {
    if args.input.is_some() {
        cfg.input = args.input.clone();
    }
    set(&mut cfg.format, args.format.map(Some));
    cfg.unbounded |= args.unbounded;
}

fn merge_gaussian(cfg: &mut GaussianConfig, a: &GaussianArgs) {
    set(&mut cfg.rho, a.rho);
    set(&mut cfg.n_candidates, a.n_candidates);
    set(&mut cfg.n_prompts, a.n_prompts);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.quantize_bins, a.quantize_bins.map(Some));
    set(&mut cfg.between_sd_judge, a.between_sd_judge);
    set(&mut cfg.between_sd_oracle, a.between_sd_oracle);
    set(&mut cfg.between_corr, a.between_corr);
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Reads an input and records its digest.
fn read_tracked(cfg: &InputConfig) -> CliResult<(String, Format, InputDigest)> {
    let path = cfg
        .input
        .as_deref()
        .ok_or_else(|| input_err("no input given (positional argument or \"input\" in --config)"))?;
    let text = read_input(path)?;
    let format = cfg.format.unwrap_or_else(|| Format::from_path(path));
    let digest = InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(text.as_bytes()),
    };
    Ok((text, format, digest))
}

/// Prefixes a load error with the file name; line numbers come from the parser.
fn in_file(path: &str, e: AuditError) -> CliError {
    match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{path}: {m}")),
        CliError::Internal(m) => CliError::Internal(format!("{path}: {m}")),
    }
}

fn load_pointwise_tracked(cfg: &InputConfig) -> CliResult<(PointwiseDataset, InputDigest)> {
    let (text, format, digest) = read_tracked(cfg)?;
    let ds = parse_pointwise(&text, format, cfg.unbounded).map_err(|e| in_file(&digest.path, e))?;
    Ok((ds, digest))
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    inputs: &'a [InputDigest],
    result: R,
}

struct Output<'a> {
    dir: &'a Path,
    command: &'a str,
}

impl Output<'_> {
    fn create(&self) -> CliResult<()> {
        fs::create_dir_all(self.dir)
            .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", self.dir.display())))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
    }

    fn json<C: Serialize, R: Serialize>(&self, name: &str, config: &C, inputs: &[InputDigest], result: R) -> CliResult<()> {
        let env = Envelope {
            tool: "judge-audit",
            version: VERSION,
            command: self.command,
            config,
            inputs,
            result,
        };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn markdown(&self, name: &str, inputs: &[InputDigest], body: &str) -> CliResult<()> {
        let mut out = format!("# judge-audit {}\n\nVersion {VERSION}.", self.command);
        for i in inputs {
            let _ = write!(out, " Input `{}` (sha256 `{}`).", i.path, i.sha256);
        }
        out.push_str("\n\n");
        out.push_str(body);
        if !out.ends_with('\n') {
            out.push('\n');
        }
        self.write(name, out.as_bytes())
    }

    fn csv(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CliResult<()> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
        self.write(name, &buf)
    }
}

fn bootstrap_config(resamples: usize, seed: u64) -> CliResult<Option<BootstrapConfig>> {
    if resamples == 0 {
        return Ok(None);
    }
    let cfg = BootstrapConfig::new(resamples, seed);
    cfg.validate()?;
    Ok(Some(cfg))
}

fn cmd_audit(args: &AuditArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg: AuditConfig = load_config(config)?;
    merge_input(&mut cfg.io, &args.io);
    set(&mut cfg.bootstrap, args.bootstrap);
    set(&mut cfg.seed, args.seed);
    let boot = bootstrap_config(cfg.bootstrap, cfg.seed)?;
    let (ds, digest) = load_pointwise_tracked(&cfg.io)?;
    let report = audit(&ds, boot.as_ref())?;
    let out = Output {
        dir: &args.io.out,
        command: "audit",
    };
    out.create()?;
    let inputs = [digest];
    out.json("report.json", &cfg, &inputs, &report)?;
    out.markdown("report.md", &inputs, &report.to_markdown())
}

#[derive(Serialize)]
struct PairwiseOutput {
    stats: crate::pairwise::PairwiseStats,
    calibration: Option<crate::pairwise::CalibrationTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration_note: Option<String>,
}

fn cmd_pairwise(args: &PairwiseArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg: PairwiseConfig = load_config(config)?;
    merge_input(&mut cfg.io, &args.io);
    set(&mut cfg.bins, args.bins);
    cfg.from_pointwise |= args.from_pointwise;
    if cfg.bins == 0 {
        return Err(input_err("--bins must be positive"));
    }
    let (text, format, digest) = read_tracked(&cfg.io)?;
    let pw: PairwiseDataset = if cfg.from_pointwise {
        let ds = parse_pointwise(&text, format, cfg.io.unbounded).map_err(|e| in_file(&digest.path, e))?;
        preferences_from_pointwise(&ds)?
    } else {
        parse_pairwise(&text, format).map_err(|e| in_file(&digest.path, e))?
    };
    let stats = pairwise_stats(&pw)?;
    let edges: Vec<f64> = (0..=cfg.bins).map(|i| i as f64 / cfg.bins as f64).collect();
    let (calibration, calibration_note) = if pw.records().iter().any(|r| r.stated_prob_a.is_some()) {
        match confidence_calibration(&pw, &edges) {
            Ok(t) => (Some(t), None),
            Err(AuditError::NoComparablePairs(m)) => (None, Some(m)),
            Err(e) => return Err(e.into()),
        }
    } else {
        (None, Some("no stated probabilities in input".to_string()))
    };
    let mut md = stats.to_markdown();
    match (&calibration, &calibration_note) {
        (Some(t), _) => {
            md.push('\n');
            md.push_str(&t.to_markdown());
        }
        (None, Some(note)) => {
            let _ = write!(md, "\nConfidence calibration: {note}.\n");
        }
        (None, None) => {}
    }
    let out = Output {
        dir: &args.io.out,
        command: "pairwise",
    };
    out.create()?;
    let inputs = [digest];
    out.json(
        "pairwise.json",
        &cfg,
        &inputs,
        PairwiseOutput {
            stats,
            calibration,
            calibration_note,
        },
    )?;
    out.markdown("pairwise.md", &inputs, &md)
}

/// How query probabilities are obtained for `estimate`.
#[derive(Debug, Clone, PartialEq)]
pub enum BudgetMode {
    /// Use `labeled` and `query_prob` as recorded in the input.
    Observed,
    /// Draw a Bernoulli label mask from a design over a fully labeled input.
    Design(DesignSpec),
}

impl std::str::FromStr for BudgetMode {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "observed" => Ok(BudgetMode::Observed),
            "uniform" => Ok(BudgetMode::Design(DesignSpec::Uniform)),
            "margin_ranked" | "margin-ranked" => Ok(BudgetMode::Design(DesignSpec::MarginRanked)),
            other => match other.strip_prefix("neyman:") {
                Some(f) if !f.is_empty() => Ok(BudgetMode::Design(DesignSpec::NeymanFeature(f.into()))),
                _ => Err(input_err(format!(
                    "unknown budget mode {other}; expected observed, uniform, margin_ranked or neyman:FEATURE"
                ))),
            },
        }
    }
}

#[derive(Serialize)]
struct EstimateOutput {
    design: String,
    n_prompts: usize,
    n_labeled_prompts: usize,
    mean_query_prob: f64,
    effective_sample_size: f64,
    recovery: crate::inference::DrRecovery,
}

fn cmd_estimate(args: &EstimateArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg: EstimateConfig = load_config(config)?;
    merge_input(&mut cfg.io, &args.io);
    set(&mut cfg.budget_mode, args.budget_mode.clone());
    set(&mut cfg.budget, args.budget.map(Some));
    set(&mut cfg.outcome_model, args.outcome_model.clone());
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.bootstrap, args.bootstrap);
    let mode: BudgetMode = cfg.budget_mode.parse()?;
    let model: OutcomeModel = cfg.outcome_model.parse()?;
    let boot = bootstrap_config(cfg.bootstrap, cfg.seed)?;
    let (ds, digest) = load_pointwise_tracked(&cfg.io)?;

    let (ds, design) = match &mode {
        BudgetMode::Observed => {
            if cfg.budget.is_some() {
                return Err(input_err("--budget applies only to simulated budget modes"));
            }
            (ds, "observed".to_string())
        }
        BudgetMode::Design(spec) => {
            let budget = cfg
                .budget
                .ok_or_else(|| input_err(format!("budget mode {} needs --budget", cfg.budget_mode)))?;
            ds.require_labeled()?;
            let design = spec.build(&ds, budget)?;
            let mut rng = rng_for(cfg.seed, 0);
            let u: Vec<f64> = (0..ds.n_prompts()).map(|_| rand::Rng::random(&mut rng)).collect();
            let mask = bernoulli_mask(&u, &design.probs);
            (apply_label_mask(&ds, &mask, &design.probs)?, spec.label())
        }
    };
    let probs = crate::inference::propensities(&ds, None)?;
    let recovery = dr_recovery(&ds, &model, None, boot.as_ref())?;
    let result = EstimateOutput {
        design,
        n_prompts: ds.n_prompts(),
        n_labeled_prompts: ds.groups().iter().filter(|g| g.is_labeled()).count(),
        mean_query_prob: probs.iter().sum::<f64>() / probs.len() as f64,
        effective_sample_size: effective_sample_size(&ds)?,
        recovery,
    };
    let md = estimate_markdown(&result);
    let out = Output {
        dir: &args.io.out,
        command: "estimate",
    };
    out.create()?;
    let inputs = [digest];
    out.json("estimate.json", &cfg, &inputs, &result)?;
    out.markdown("estimate.md", &inputs, &md)
}

fn estimate_markdown(r: &EstimateOutput) -> String {
    use crate::report::fmt_num;
    let d = &r.recovery;
    let mut md = String::from("## Doubly robust estimates\n\n| Quantity | Estimate | SE |\n|---|---|---|\n");
    for (name, i) in [("Random value", 0), ("Judge value", 1), ("Oracle-best value", 2)] {
        let _ = writeln!(md, "| {name} | {} | {} |", fmt_num(d.psi[i]), fmt_num(d.psi_std_error[i]));
    }
    let _ = writeln!(
        md,
        "| Recovery | {} [{}, {}] | {} |",
        fmt_num(d.estimate.point),
        fmt_num(d.estimate.lo),
        fmt_num(d.estimate.hi),
        fmt_num(d.std_error)
    );
    if let Some(b) = &d.bootstrap {
        let _ = writeln!(
            md,
            "\nBootstrap cross-check: [{}, {}] ({} resamples, {} skipped).",
            fmt_num(b.estimate.lo),
            fmt_num(b.estimate.hi),
            b.resamples,
            b.skipped
        );
    }
    let _ = writeln!(
        md,
        "\nDesign {}: {} of {} prompts labeled, mean query probability {}, ESS {}.",
        r.design,
        r.n_labeled_prompts,
        r.n_prompts,
        fmt_num(r.mean_query_prob),
        fmt_num(r.effective_sample_size)
    );
    md
}

#[derive(Serialize)]
struct RouteOutput {
    sweep: Vec<crate::routing::RouteResult>,
    voi: crate::routing::VoiReport,
    gain_decomposition: Option<crate::routing::GainDecomposition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gain_decomposition_note: Option<String>,
}

fn cmd_route(args: &RouteArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg: RouteConfig = load_config(config)?;
    merge_input(&mut cfg.io, &args.io);
    set(&mut cfg.policies, args.policies.clone());
    set(&mut cfg.budgets, args.budgets.clone());
    set(&mut cfg.bins, args.bins);
    let policies: Vec<RoutingPolicy> = cfg.policies.iter().map(|p| p.parse()).collect::<Result<_, AuditError>>()?;
    let (ds, digest) = load_pointwise_tracked(&cfg.io)?;
    let outcomes = compute_outcomes(&ds)?;
    let sweep = budget_sweep(&outcomes, &policies, &cfg.budgets)?;
    let (decomp, note) = match gain_decomposition(&outcomes, "margin", cfg.bins) {
        Ok(d) => (Some(d), None),
        Err(AuditError::InsufficientData(m)) => (None, Some(m)),
        Err(e) => return Err(e.into()),
    };
    let out = Output {
        dir: &args.io.out,
        command: "route",
    };
    out.create()?;
    out.csv("route.csv", |buf| sweep_to_csv(&sweep, buf))?;
    out.json(
        "route.json",
        &cfg,
        &[digest],
        RouteOutput {
            sweep,
            voi: voi_diagnostics(&outcomes),
            gain_decomposition: decomp,
            gain_decomposition_note: note,
        },
    )
}

#[derive(Serialize)]
struct CalibrateOutput {
    n_fit_prompts: usize,
    n_eval_prompts: usize,
    calibrator: crate::calibration::MonotoneCalibrator,
    effect: crate::calibration::CalibrationEffect,
}

fn cmd_calibrate(args: &CalibrateArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg: CalibrateConfig = load_config(config)?;
    merge_input(&mut cfg.io, &args.io);
    set(&mut cfg.split_seed, args.split_seed);
    set(&mut cfg.split_frac, args.split_frac);
    let (ds, digest) = load_pointwise_tracked(&cfg.io)?;
    ds.require_labeled()?;
    let (fit, eval) = split_prompts(&ds, cfg.split_seed, cfg.split_frac)?;
    let calibrator = fit_dataset(&fit)?;
    let effect = calibration_effect(&eval, &calibrator)?;
    let md = effect.to_markdown();
    let out = Output {
        dir: &args.io.out,
        command: "calibrate",
    };
    out.create()?;
    let inputs = [digest];
    out.json(
        "calibrate.json",
        &cfg,
        &inputs,
        CalibrateOutput {
            n_fit_prompts: fit.n_prompts(),
            n_eval_prompts: eval.n_prompts(),
            calibrator,
            effect,
        },
    )?;
    out.markdown("calibrate.md", &inputs, &md)
}

fn write_dataset(out: &Output<'_>, name: &str, ds: &PointwiseDataset) -> CliResult<()> {
    out.csv(name, |buf| write_pointwise(ds, Format::Jsonl, buf))
}

#[derive(Serialize)]
struct GaussianSummary {
    global_r: Option<f64>,
    within_r: Option<f64>,
    recovery: Option<f64>,
    v_oracle: f64,
    v_random: f64,
    v_judge: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    curve: Option<Vec<crate::simulation::CurvePoint>>,
}

fn parse_bin_list(items: &[String]) -> CliResult<Vec<Option<usize>>> {
    items
        .iter()
        .map(|s| match s.trim() {
            "continuous" | "none" => Ok(None),
            n => n
                .parse()
                .map(Some)
                .map_err(|_| input_err(format!("bad bin count {n}; use an integer or `continuous`"))),
        })
        .collect()
}

fn cmd_simulate(cmd: &SimulateCommand, config: Option<&Path>) -> CliResult<()> {
    match cmd {
        SimulateCommand::Gaussian { base, rhos } => {
            let mut cfg: GaussianRunConfig = load_config(config)?;
            merge_gaussian(&mut cfg.base, base);
            set(&mut cfg.rhos, rhos.clone().map(Some));
            let table = simulate_table(&cfg.base)?;
            let ds = table_to_dataset(&table)?;
            let sel = table.selection_values();
            let curve = match &cfg.rhos {
                Some(r) => Some(gaussian_recovery_curve(r, &cfg.base)?),
                None => None,
            };
            let out = Output {
                dir: &base.out,
                command: "simulate gaussian",
            };
            out.create()?;
            write_dataset(&out, "dataset.jsonl", &ds)?;
            if let Some(c) = &curve {
                out.csv("curve.csv", |buf| {
                    let mut w = csv::Writer::from_writer(buf);
                    w.write_record(["rho", "recovery", "within_r"])?;
                    for p in c {
                        w.write_record([p.rho.to_string(), p.recovery.to_string(), p.within_r.to_string()])?;
                    }
                    w.flush()
                })?;
            }
            out.json(
                "simulate.json",
                &cfg,
                &[],
                GaussianSummary {
                    global_r: table.global_correlation().ok(),
                    within_r: table.residuals().within_correlation().ok(),
                    recovery: sel.recovery().ok(),
                    v_oracle: sel.v_oracle,
                    v_random: sel.v_random,
                    v_judge: sel.v_judge,
                    curve,
                },
            )
        }
        SimulateCommand::Discretize { base, bin_list } => {
            let mut cfg: DiscretizeConfig = load_config(config)?;
            merge_gaussian(&mut cfg.base, base);
            if let Some(items) = bin_list {
                cfg.bin_list = parse_bin_list(items)?;
            }
            let points = discretization_sweep(&cfg.base, &cfg.bin_list)?;
            let out = Output {
                dir: &base.out,
                command: "simulate discretize",
            };
            out.create()?;
            out.csv("discretize.csv", |buf| {
                let mut w = csv::Writer::from_writer(buf);
                w.write_record(["bins", "p_eff", "recovery"])?;
                for p in &points {
                    let bins = p.bins.map(|b| b.to_string()).unwrap_or_else(|| "continuous".into());
                    w.write_record([bins, p.p_eff.to_string(), p.recovery.to_string()])?;
                }
                w.flush()
            })?;
            out.json("discretize.json", &cfg, &[], &points)
        }
        SimulateCommand::Requirements { base, targets, tol } => {
            let mut cfg: RequirementsConfig = load_config(config)?;
            merge_gaussian(&mut cfg.base, base);
            set(&mut cfg.targets, targets.clone());
            set(&mut cfg.tol, *tol);
            let reqs = recovery_requirements(&cfg.targets, &cfg.base, cfg.tol)?;
            let out = Output {
                dir: &base.out,
                command: "simulate requirements",
            };
            out.create()?;
            out.csv("requirements.csv", |buf| {
                let mut w = csv::Writer::from_writer(buf);
                w.write_record(["target", "rho", "recovery", "p_eff"])?;
                for r in &reqs {
                    w.write_record([r.target.to_string(), r.rho.to_string(), r.recovery.to_string(), r.p_eff.to_string()])?;
                }
                w.flush()
            })?;
            out.json("requirements.json", &cfg, &[], &reqs)
        }
        SimulateCommand::Nonident {
            base,
            target_r,
            rho_1,
            rho_2,
        } => {
            let mut cfg: NonidentConfig = load_config(config)?;
            merge_gaussian(&mut cfg.base, base);
            set(&mut cfg.target_r, *target_r);
            set(&mut cfg.rho_1, *rho_1);
            set(&mut cfg.rho_2, *rho_2);
            let pair = nonidentifiability_pair(cfg.target_r, cfg.rho_1, cfg.rho_2, &cfg.base)?;
            let out = Output {
                dir: &base.out,
                command: "simulate nonident",
            };
            out.create()?;
            for (i, c) in pair.configs.iter().enumerate() {
                write_dataset(&out, &format!("dataset_{}.jsonl", i + 1), &generate_gaussian(c)?)?;
            }
            out.json("nonident.json", &cfg, &[], &pair)
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> CliResult<()> {
    let config = cli.config.as_deref();
    let go = || match &cli.command {
        Command::Audit(a) => cmd_audit(a, config),
        Command::Pairwise(a) => cmd_pairwise(a, config),
        Command::Estimate(a) => cmd_estimate(a, config),
        Command::Simulate(s) => cmd_simulate(s, config),
        Command::Route(a) => cmd_route(a, config),
        Command::Calibrate(a) => cmd_calibrate(a, config),
    };
    match cli.threads {
        None => go(),
        Some(0) => Err(input_err("--threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Internal(e.to_string()))?
            .install(go),
    }
}

/// Parses arguments, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("judge-audit: error: {e}");
            e.exit_code()
        }
    }
}
