//! Evaluation records: the pointwise and pairwise data model, file loading
//! (JSONL and CSV), validation and serialization.
//!
//! Judge scores are normalized to `[0, 1]` at ingestion. A file whose judge
//! scale values exceed 1 is read as a 0-100 file and divided by 100; the scale
//! is decided once per file and a file mixing both scales is rejected.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::error::{AuditError, Result};

/// On-disk encoding of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// `.csv` files are CSV, everything else is read as JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl FromStr for Format {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "ndjson" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(AuditError::Config(format!(
                "unknown format '{other}', expected jsonl or csv"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Format::Jsonl => f.write_str("jsonl"),
            Format::Csv => f.write_str("csv"),
        }
    }
}

/// One (prompt, candidate) row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateRecord {
    pub prompt_id: String,
    pub candidate_id: String,
    pub judge_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_label: Option<f64>,
    /// Whether the oracle was queried for this record.
    pub labeled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_prob: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resample_scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
}

impl CandidateRecord {
    /// A fully labeled record with no annotations.
    pub fn labeled(
        prompt_id: impl Into<String>,
        candidate_id: impl Into<String>,
        judge_score: f64,
        oracle_label: f64,
    ) -> Self {
        CandidateRecord {
            prompt_id: prompt_id.into(),
            candidate_id: candidate_id.into(),
            judge_score,
            oracle_label: Some(oracle_label),
            labeled: true,
            query_prob: None,
            features: BTreeMap::new(),
            resample_scores: None,
            ci_low: None,
            ci_high: None,
        }
    }

    fn validate(&self, unbounded: bool) -> std::result::Result<(), String> {
        let in_range = |v: f64| v.is_finite() && (unbounded || (0.0..=1.0).contains(&v));
        if !in_range(self.judge_score) {
            return Err(format!("judge_score {} out of range", self.judge_score));
        }
        match (self.labeled, self.oracle_label) {
            (true, None) => return Err("labeled record without oracle_label".into()),
            (false, Some(_)) => return Err("unlabeled record carries an oracle_label".into()),
            (_, Some(o)) if !in_range(o) => {
                return Err(format!("oracle_label {o} out of range"));
            }
            _ => {}
        }
        if let Some(p) = self.query_prob {
            if !(p > 0.0 && p <= 1.0) {
                return Err(format!("query_prob {p} outside (0, 1]"));
            }
        }
        for v in [self.ci_low, self.ci_high].into_iter().flatten() {
            if !in_range(v) {
                return Err(format!("confidence bound {v} out of range"));
            }
        }
        if let (Some(lo), Some(hi)) = (self.ci_low, self.ci_high) {
            if lo > hi {
                return Err(format!("ci_low {lo} exceeds ci_high {hi}"));
            }
        }
        if let Some(samples) = &self.resample_scores {
            if let Some(v) = samples.iter().find(|v| !in_range(**v)) {
                return Err(format!("resample score {v} out of range"));
            }
        }
        if self.features.values().any(|v| !v.is_finite()) {
            return Err("non-finite feature value".into());
        }
        Ok(())
    }
}

/// All candidates for one prompt, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub prompt_id: String,
    pub candidates: Vec<CandidateRecord>,
}

impl PromptGroup {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn judge_scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.judge_score).collect()
    }

    /// Oracle labels, or `None` when any candidate is unlabeled.
    pub fn oracle_labels(&self) -> Option<Vec<f64>> {
        self.candidates.iter().map(|c| c.oracle_label).collect()
    }

    /// The prompt-level query indicator R.
    pub fn is_labeled(&self) -> bool {
        self.candidates.iter().all(|c| c.labeled)
    }

    /// The prompt-level query probability; absent means the prompt was
    /// labeled with certainty.
    pub fn query_prob(&self) -> Option<f64> {
        self.candidates.first().and_then(|c| c.query_prob)
    }

    /// Mean over candidates of a named record feature, if every candidate has it.
    pub fn feature_mean(&self, name: &str) -> Option<f64> {
        let values: Option<Vec<f64>> = self
            .candidates
            .iter()
            .map(|c| c.features.get(name).copied())
            .collect();
        values.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// A validated collection of prompt groups.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseDataset {
    groups: Vec<PromptGroup>,
    n_per_prompt: Option<usize>,
    unbounded: bool,
}

impl PointwiseDataset {
    /// Validates and wraps prompt groups with scores on the `[0, 1]` scale.
    pub fn new(groups: Vec<PromptGroup>) -> Result<Self> {
        Self::build(groups, false, None)
    }

    /// As [`PointwiseDataset::new`] but without the `[0, 1]` range check, for
    /// simulated data on an unbounded scale.
    pub fn new_unbounded(groups: Vec<PromptGroup>) -> Result<Self> {
        Self::build(groups, true, None)
    }

    /// Groups flat records by `prompt_id`, preserving first-appearance order.
    pub fn from_records(records: Vec<CandidateRecord>, unbounded: bool) -> Result<Self> {
        let lines: Vec<usize> = (1..=records.len()).collect();
        Self::from_records_at(records, &lines, unbounded)
    }

    fn from_records_at(
        records: Vec<CandidateRecord>,
        lines: &[usize],
        unbounded: bool,
    ) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut groups: Vec<PromptGroup> = Vec::new();
        let mut group_lines: Vec<Vec<usize>> = Vec::new();
        for (rec, &line) in records.into_iter().zip(lines) {
            rec.validate(unbounded)
                .map_err(|m| AuditError::validation_at(line, m))?;
            let slot = *index.entry(rec.prompt_id.clone()).or_insert_with(|| {
                groups.push(PromptGroup {
                    prompt_id: rec.prompt_id.clone(),
                    candidates: Vec::new(),
                });
                group_lines.push(Vec::new());
                groups.len() - 1
            });
            groups[slot].candidates.push(rec);
            group_lines[slot].push(line);
        }
        Self::build(groups, unbounded, Some(&group_lines))
    }

    fn build(
        groups: Vec<PromptGroup>,
        unbounded: bool,
        lines: Option<&[Vec<usize>]>,
    ) -> Result<Self> {
        let err_at = |g: usize, c: usize, msg: String| match lines {
            Some(l) => AuditError::validation_at(l[g][c], msg),
            None => AuditError::validation(msg),
        };
        if groups.is_empty() {
            return Err(AuditError::validation("dataset holds no records"));
        }
        let partial = groups
            .iter()
            .flat_map(|g| &g.candidates)
            .any(|c| !c.labeled);
        let mut seen_prompts = HashSet::new();
        for (gi, group) in groups.iter().enumerate() {
            if !seen_prompts.insert(group.prompt_id.as_str()) {
                return Err(AuditError::validation(format!(
                    "duplicate prompt_id {}",
                    group.prompt_id
                )));
            }
            if group.len() < 2 {
                return Err(err_at(
                    gi,
                    0,
                    format!(
                        "prompt {} has {} candidate(s); at least 2 are required",
                        group.prompt_id,
                        group.len()
                    ),
                ));
            }
            let mut seen = HashSet::new();
            let first = &group.candidates[0];
            for (ci, cand) in group.candidates.iter().enumerate() {
                if cand.prompt_id != group.prompt_id {
                    return Err(err_at(gi, ci, "record filed under the wrong prompt".into()));
                }
                if lines.is_none() {
                    cand.validate(unbounded).map_err(AuditError::validation)?;
                }
                if !seen.insert(cand.candidate_id.as_str()) {
                    return Err(err_at(
                        gi,
                        ci,
                        format!(
                            "duplicate candidate_id {} in prompt {}",
                            cand.candidate_id, group.prompt_id
                        ),
                    ));
                }
                if partial && cand.query_prob.is_none() {
                    return Err(err_at(
                        gi,
                        ci,
                        "dataset has unlabeled records, so every record needs query_prob".into(),
                    ));
                }
                if cand.labeled != first.labeled || cand.query_prob != first.query_prob {
                    return Err(err_at(
                        gi,
                        ci,
                        format!(
                            "labeled and query_prob must agree across prompt {}",
                            group.prompt_id
                        ),
                    ));
                }
            }
        }
        let n0 = groups[0].len();
        let n_per_prompt = groups.iter().all(|g| g.len() == n0).then_some(n0);
        Ok(PointwiseDataset {
            groups,
            n_per_prompt,
            unbounded,
        })
    }

    pub fn groups(&self) -> &[PromptGroup] {
        &self.groups
    }

    pub fn n_prompts(&self) -> usize {
        self.groups.len()
    }

    pub fn n_records(&self) -> usize {
        self.groups.iter().map(PromptGroup::len).sum()
    }

    /// The common candidate count, when every prompt has the same number.
    pub fn n_per_prompt(&self) -> Option<usize> {
        self.n_per_prompt
    }

    pub fn is_unbounded(&self) -> bool {
        self.unbounded
    }

    /// True when some records lack oracle labels.
    pub fn is_partial(&self) -> bool {
        self.groups.iter().any(|g| !g.is_labeled())
    }

    pub fn records(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.groups.iter().flat_map(|g| g.candidates.iter())
    }

    /// Fails with [`AuditError::Unlabeled`] naming the first unlabeled record.
    pub fn require_labeled(&self) -> Result<()> {
        match self.records().find(|r| r.oracle_label.is_none()) {
            Some(r) => Err(AuditError::Unlabeled {
                prompt_id: r.prompt_id.clone(),
                candidate_id: r.candidate_id.clone(),
            }),
            None => Ok(()),
        }
    }

    /// A copy with every judge score passed through `f`. The copy is
    /// unbounded if any mapped score leaves `[0, 1]`.
    pub fn map_judge_scores(&self, f: impl Fn(f64) -> f64) -> PointwiseDataset {
        let mut groups = self.groups.clone();
        let mut unbounded = self.unbounded;
        for c in groups.iter_mut().flat_map(|g| g.candidates.iter_mut()) {
            c.judge_score = f(c.judge_score);
            unbounded |= !(0.0..=1.0).contains(&c.judge_score);
        }
        PointwiseDataset {
            groups,
            n_per_prompt: self.n_per_prompt,
            unbounded,
        }
    }

    /// The prompts at `indices` (which may repeat), as a new dataset. Repeated
    /// prompts get a `#k` suffix so prompt ids stay unique.
    pub fn select(&self, indices: &[usize]) -> PointwiseDataset {
        let mut counts = vec![0usize; self.groups.len()];
        let groups = indices
            .iter()
            .map(|&i| {
                let mut g = self.groups[i].clone();
                counts[i] += 1;
                if counts[i] > 1 {
                    let id = format!("{}#{}", g.prompt_id, counts[i] - 1);
                    for c in &mut g.candidates {
                        c.prompt_id.clone_from(&id);
                    }
                    g.prompt_id = id;
                }
                g
            })
            .collect::<Vec<_>>();
        let n0 = groups.first().map_or(0, PromptGroup::len);
        PointwiseDataset {
            n_per_prompt: groups.iter().all(|g| g.len() == n0).then_some(n0),
            groups,
            unbounded: self.unbounded,
        }
    }

    /// Concatenation of two datasets; prompt ids must not collide.
    pub fn concat(&self, other: &PointwiseDataset) -> Result<PointwiseDataset> {
        let mut groups = self.groups.clone();
        groups.extend(other.groups.iter().cloned());
        Self::build(groups, self.unbounded || other.unbounded, None)
    }
}

fn de_opaque_id<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "expected a string id, found {other}"
        ))),
    }
}

#[derive(Debug, Deserialize)]
struct RawCandidate {
    #[serde(deserialize_with = "de_opaque_id")]
    prompt_id: String,
    #[serde(deserialize_with = "de_opaque_id")]
    candidate_id: String,
    judge_score: f64,
    #[serde(default)]
    oracle_label: Option<f64>,
    #[serde(default)]
    labeled: Option<bool>,
    #[serde(default)]
    query_prob: Option<f64>,
    #[serde(default)]
    features: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    resample_scores: Option<Vec<f64>>,
    #[serde(default)]
    ci_low: Option<f64>,
    #[serde(default)]
    ci_high: Option<f64>,
}

impl RawCandidate {
    /// Values on the judge scale, which share the file's scale decision.
    fn judge_scale_values(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.judge_score)
            .chain(self.ci_low)
            .chain(self.ci_high)
            .chain(self.resample_scores.iter().flatten().copied())
    }

    fn into_record(self, divisor: f64) -> CandidateRecord {
        CandidateRecord {
            labeled: self.labeled.unwrap_or(self.oracle_label.is_some()),
            prompt_id: self.prompt_id,
            candidate_id: self.candidate_id,
            judge_score: self.judge_score / divisor,
            oracle_label: self.oracle_label,
            query_prob: self.query_prob,
            features: self.features.unwrap_or_default(),
            resample_scores: self
                .resample_scores
                .map(|v| v.into_iter().map(|x| x / divisor).collect()),
            ci_low: self.ci_low.map(|x| x / divisor),
            ci_high: self.ci_high.map(|x| x / divisor),
        }
    }
}

/// Decides the judge scale for a whole file: 1 for `[0, 1]`, 100 for 0-100.
fn detect_divisor(rows: &[(usize, RawCandidate)]) -> Result<f64> {
    let percent = rows
        .iter()
        .flat_map(|(line, r)| r.judge_scale_values().map(move |v| (*line, v)))
        .find(|&(_, v)| v > 1.0);
    let Some((percent_line, percent_value)) = percent else {
        return Ok(1.0);
    };
    // 0 and 1 are valid points of the 0-100 grid; anything strictly between is not.
    let unit = rows
        .iter()
        .flat_map(|(line, r)| r.judge_scale_values().map(move |v| (*line, v)))
        .find(|&(_, v)| v > 0.0 && v < 1.0);
    if let Some((unit_line, unit_value)) = unit {
        return Err(AuditError::MixedScale {
            unit_line,
            unit_value,
            percent_line,
            percent_value,
        });
    }
    if let Some((line, v)) = rows
        .iter()
        .flat_map(|(line, r)| r.judge_scale_values().map(move |v| (*line, v)))
        .find(|&(_, v)| v > 100.0)
    {
        return Err(AuditError::validation_at(
            line,
            format!("score {v} exceeds the 0-100 scale"),
        ));
    }
    Ok(100.0)
}

pub(crate) fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            AuditError::NotFound {
                path: path.to_path_buf(),
            }
        } else {
            AuditError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Non-empty JSONL lines as `(line number, object)`.
fn jsonl_objects(text: &str) -> Result<Vec<(usize, Value)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Value>(l)
                .map(|v| (i + 1, v))
                .map_err(|e| AuditError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// CSV rows as JSON objects. Cells of JSON-valued columns are parsed as JSON,
/// numeric columns as numbers; empty cells are omitted.
fn csv_objects(text: &str, numeric: &[&str], json_cols: &[&str]) -> Result<Vec<(usize, Value)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| AuditError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| AuditError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let mut obj = Map::new();
        for (name, cell) in headers.iter().zip(row.iter()) {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let parse_err = |what: &str| AuditError::Parse {
                line,
                message: format!("column {name}: cannot parse '{cell}' as {what}"),
            };
            let value = if json_cols.contains(&name) {
                serde_json::from_str(cell).map_err(|_| parse_err("JSON"))?
            } else if numeric.contains(&name) {
                let x: f64 = cell.parse().map_err(|_| parse_err("a number"))?;
                serde_json::Number::from_f64(x)
                    .map(Value::Number)
                    .ok_or_else(|| parse_err("a finite number"))?
            } else if name == "labeled" {
                Value::Bool(match cell.to_ascii_lowercase().as_str() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(parse_err("a boolean")),
                })
            } else {
                Value::String(cell.to_string())
            };
            obj.insert(name.to_string(), value);
        }
        out.push((line, Value::Object(obj)));
    }
    Ok(out)
}

fn decode_rows<T: for<'de> Deserialize<'de>>(objects: Vec<(usize, Value)>) -> Result<Vec<(usize, T)>> {
    objects
        .into_iter()
        .map(|(line, v)| {
            serde_json::from_value(v)
                .map(|r| (line, r))
                .map_err(|e| AuditError::Parse {
                    line,
                    message: e.to_string(),
                })
        })
        .collect()
}

const POINTWISE_NUMERIC: &[&str] = &["judge_score", "oracle_label", "query_prob", "ci_low", "ci_high"];
const POINTWISE_JSON: &[&str] = &["features", "resample_scores"];

/// Parses pointwise records from text. `unbounded` skips scale detection and
/// the `[0, 1]` range checks (for simulated data).
pub fn parse_pointwise(text: &str, format: Format, unbounded: bool) -> Result<PointwiseDataset> {
    let objects = match format {
        Format::Jsonl => jsonl_objects(text)?,
        Format::Csv => csv_objects(text, POINTWISE_NUMERIC, POINTWISE_JSON)?,
    };
    let rows: Vec<(usize, RawCandidate)> = decode_rows(objects)?;
    let divisor = if unbounded { 1.0 } else { detect_divisor(&rows)? };
    let lines: Vec<usize> = rows.iter().map(|(l, _)| *l).collect();
    let records = rows
        .into_iter()
        .map(|(_, r)| r.into_record(divisor))
        .collect();
    PointwiseDataset::from_records_at(records, &lines, unbounded)
}

/// Loads a pointwise dataset from a JSONL or CSV file.
pub fn load_pointwise(path: &Path, format: Format) -> Result<PointwiseDataset> {
    parse_pointwise(&read_input(path)?, format, false)
}

/// Loads simulated data without range checks or scale normalization.
pub fn load_pointwise_unbounded(path: &Path, format: Format) -> Result<PointwiseDataset> {
    parse_pointwise(&read_input(path)?, format, true)
}

fn json_cell<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serializes a pointwise dataset in file order.
pub fn write_pointwise<W: Write>(ds: &PointwiseDataset, format: Format, out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    match format {
        Format::Jsonl => {
            for rec in ds.records() {
                serde_json::to_writer(&mut out, rec)?;
                out.write_all(b"\n")?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record([
                "prompt_id",
                "candidate_id",
                "judge_score",
                "oracle_label",
                "labeled",
                "query_prob",
                "features",
                "resample_scores",
                "ci_low",
                "ci_high",
            ])?;
            for r in ds.records() {
                w.write_record([
                    r.prompt_id.clone(),
                    r.candidate_id.clone(),
                    r.judge_score.to_string(),
                    opt_cell(r.oracle_label),
                    r.labeled.to_string(),
                    opt_cell(r.query_prob),
                    if r.features.is_empty() {
                        String::new()
                    } else {
                        json_cell(&r.features)
                    },
                    r.resample_scores.as_ref().map(json_cell).unwrap_or_default(),
                    opt_cell(r.ci_low),
                    opt_cell(r.ci_high),
                ])?;
            }
            w.flush()?;
        }
    }
    out.flush()
}

/// A three-way preference: first candidate, second candidate, or tie.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Choice {
    A,
    B,
    #[serde(rename = "TIE")]
    Tie,
}

impl Choice {
    /// The preference implied by two scores, TIE on exact equality.
    pub fn from_scores(a: f64, b: f64) -> Choice {
        if a > b {
            Choice::A
        } else if b > a {
            Choice::B
        } else {
            Choice::Tie
        }
    }

    pub fn is_tie(self) -> bool {
        self == Choice::Tie
    }
}

impl FromStr for Choice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Choice::A),
            "B" => Ok(Choice::B),
            "TIE" => Ok(Choice::Tie),
            other => Err(format!("expected A, B or TIE, found '{other}'")),
        }
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One judged A/B comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRecord {
    #[serde(deserialize_with = "de_opaque_id")]
    pub prompt_id: String,
    #[serde(deserialize_with = "de_opaque_id")]
    pub candidate_a: String,
    #[serde(deserialize_with = "de_opaque_id")]
    pub candidate_b: String,
    pub judge_choice: Choice,
    pub oracle_choice: Choice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stated_prob_a: Option<f64>,
}

impl PairwiseRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.candidate_a == self.candidate_b {
            return Err(format!(
                "candidate_a and candidate_b are both {}",
                self.candidate_a
            ));
        }
        if let Some(p) = self.stated_prob_a {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("stated_prob_a {p} outside [0, 1]"));
            }
        }
        if let Some(c) = self.confidence {
            if !(1..=5).contains(&c) {
                return Err(format!("confidence {c} outside 1-5"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairwiseDataset {
    records: Vec<PairwiseRecord>,
}

impl PairwiseDataset {
    pub fn new(records: Vec<PairwiseRecord>) -> Result<Self> {
        for r in &records {
            r.validate().map_err(AuditError::validation)?;
        }
        Ok(PairwiseDataset { records })
    }

    pub fn records(&self) -> &[PairwiseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records belonging to one prompt.
    pub fn for_prompt<'a>(&'a self, prompt_id: &'a str) -> impl Iterator<Item = &'a PairwiseRecord> + 'a {
        self.records.iter().filter(move |r| r.prompt_id == prompt_id)
    }
}

const PAIRWISE_NUMERIC: &[&str] = &["confidence", "stated_prob_a"];

pub fn parse_pairwise(text: &str, format: Format) -> Result<PairwiseDataset> {
    let objects = match format {
        Format::Jsonl => jsonl_objects(text)?,
        Format::Csv => csv_objects(text, PAIRWISE_NUMERIC, &[])?,
    };
    // CSV numbers arrive as floats; confidence is an integer field.
    let objects = objects
        .into_iter()
        .map(|(line, mut v)| {
            if let Some(c) = v.get_mut("confidence") {
                if let Some(x) = c.as_f64() {
                    if x.fract() == 0.0 && x >= 0.0 {
                        *c = Value::from(x as u64);
                    }
                }
            }
            (line, v)
        })
        .collect();
    let rows: Vec<(usize, PairwiseRecord)> = decode_rows(objects)?;
    if rows.is_empty() {
        return Err(AuditError::validation("dataset holds no records"));
    }
    for (line, r) in &rows {
        r.validate().map_err(|m| AuditError::validation_at(*line, m))?;
    }
    Ok(PairwiseDataset {
        records: rows.into_iter().map(|(_, r)| r).collect(),
    })
}

/// Loads a pairwise dataset; choices are read case-insensitively.
pub fn load_pairwise(path: &Path, format: Format) -> Result<PairwiseDataset> {
    parse_pairwise(&read_input(path)?, format)
}

pub fn write_pairwise<W: Write>(pw: &PairwiseDataset, format: Format, out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    match format {
        Format::Jsonl => {
            for rec in pw.records() {
                serde_json::to_writer(&mut out, rec)?;
                out.write_all(b"\n")?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record([
                "prompt_id",
                "candidate_a",
                "candidate_b",
                "judge_choice",
                "oracle_choice",
                "confidence",
                "stated_prob_a",
            ])?;
            let choice = |c: Choice| match c {
                Choice::A => "A",
                Choice::B => "B",
                Choice::Tie => "TIE",
            };
            for r in pw.records() {
                w.write_record([
                    r.prompt_id.as_str(),
                    r.candidate_a.as_str(),
                    r.candidate_b.as_str(),
                    choice(r.judge_choice),
                    choice(r.oracle_choice),
                    &r.confidence.map(|c| c.to_string()).unwrap_or_default(),
                    &opt_cell(r.stated_prob_a),
                ])?;
            }
            w.flush()?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    const D1: &str = r#"{"prompt_id":"P1","candidate_id":"a","judge_score":0.8,"oracle_label":1.0}
{"prompt_id":"P1","candidate_id":"b","judge_score":0.2,"oracle_label":0.0}
{"prompt_id":"P2","candidate_id":"a","judge_score":0.6,"oracle_label":0.0}
{"prompt_id":"P2","candidate_id":"b","judge_score":0.4,"oracle_label":1.0}
"#;

    fn line(p: &str, c: &str, s: f64) -> String {
        format!(r#"{{"prompt_id":"{p}","candidate_id":"{c}","judge_score":{s},"oracle_label":0.5}}"#)
    }

    #[test]
    fn group_of_one_is_rejected() {
        let text = [line("P1", "a", 0.1), line("P1", "b", 0.2), line("P2", "a", 0.3)].join("\n");
        let err = parse_pointwise(&text, Format::Jsonl, false).unwrap_err();
        assert!(matches!(err, AuditError::Validation { line: Some(3), .. }), "{err}");
    }

    #[test]
    fn mixed_scales_are_rejected() {
        let text = [line("P1", "a", 85.0), line("P1", "b", 0.85)].join("\n");
        let err = parse_pointwise(&text, Format::Jsonl, false).unwrap_err();
        assert!(matches!(err, AuditError::MixedScale { unit_line: 2, percent_line: 1, .. }));
    }

    #[test]
    fn percent_scale_is_divided() {
        let text = [line("P1", "a", 85.0), line("P1", "b", 0.0), line("P1", "c", 100.0)].join("\n");
        let ds = parse_pointwise(&text, Format::Jsonl, false).unwrap();
        assert_eq!(ds.groups()[0].judge_scores(), vec![0.85, 0.0, 1.0]);
    }

    #[test]
    fn d1_fixture_groups() {
        let ds = parse_pointwise(D1, Format::Jsonl, false).unwrap();
        assert_eq!(ds.n_prompts(), 2);
        assert_eq!(ds.n_per_prompt(), Some(2));
        assert!(ds.records().all(|r| r.labeled));
        assert!(!ds.is_partial());
    }

    #[test]
    fn interleaved_rows_group_in_first_appearance_order() {
        let text = [
            line("Q", "a", 0.1),
            line("P", "a", 0.2),
            line("Q", "b", 0.3),
            line("P", "b", 0.4),
        ]
        .join("\n");
        let ds = parse_pointwise(&text, Format::Jsonl, false).unwrap();
        assert_eq!(ds.groups()[0].prompt_id, "Q");
        assert_eq!(ds.groups()[0].judge_scores(), vec![0.1, 0.3]);
    }

    #[test]
    fn unlabeled_without_query_prob_fails() {
        let text = r#"{"prompt_id":"P","candidate_id":"a","judge_score":0.1}
{"prompt_id":"P","candidate_id":"b","judge_score":0.2}"#;
        assert!(parse_pointwise(text, Format::Jsonl, false).is_err());
        let text = r#"{"prompt_id":"P","candidate_id":"a","judge_score":0.1,"query_prob":0.5}
{"prompt_id":"P","candidate_id":"b","judge_score":0.2,"query_prob":0.5}"#;
        let ds = parse_pointwise(text, Format::Jsonl, false).unwrap();
        assert!(ds.is_partial());
        assert_eq!(ds.groups()[0].query_prob(), Some(0.5));
    }

    #[test]
    fn labeled_flag_without_label_fails() {
        let text = r#"{"prompt_id":"P","candidate_id":"a","judge_score":0.1,"labeled":true,"query_prob":1.0}
{"prompt_id":"P","candidate_id":"b","judge_score":0.2,"oracle_label":0.3}"#;
        let err = parse_pointwise(text, Format::Jsonl, false).unwrap_err();
        assert!(matches!(err, AuditError::Validation { line: Some(1), .. }));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = format!("{}\n{{not json\n", line("P", "a", 0.1));
        let err = parse_pointwise(&text, Format::Jsonl, false).unwrap_err();
        assert!(matches!(err, AuditError::Parse { line: 2, .. }));
    }

    #[test]
    fn ci_bounds_must_be_ordered() {
        let text = r#"{"prompt_id":"P","candidate_id":"a","judge_score":0.1,"oracle_label":0.1,"ci_low":0.5,"ci_high":0.2}
{"prompt_id":"P","candidate_id":"b","judge_score":0.2,"oracle_label":0.3}"#;
        assert!(parse_pointwise(text, Format::Jsonl, false).is_err());
    }

    #[test]
    fn csv_with_json_cells() {
        let text = "prompt_id,candidate_id,judge_score,oracle_label,resample_scores,features\n\
                    P,a,80,1,\"[80,70]\",\"{\"\"len\"\":12}\"\n\
                    P,b,20,0,\"[20,30]\",\n";
        let ds = parse_pointwise(text, Format::Csv, false).unwrap();
        let a = &ds.groups()[0].candidates[0];
        assert_eq!(a.judge_score, 0.8);
        assert_eq!(a.resample_scores.as_deref(), Some(&[0.8, 0.7][..]));
        assert_eq!(a.features.get("len"), Some(&12.0));
    }

    #[test]
    fn csv_round_trip() {
        let ds = parse_pointwise(D1, Format::Jsonl, false).unwrap();
        let mut buf = Vec::new();
        write_pointwise(&ds, Format::Csv, &mut buf).unwrap();
        let back = parse_pointwise(std::str::from_utf8(&buf).unwrap(), Format::Csv, false).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn pairwise_choices_are_case_insensitive() {
        let text = r#"{"prompt_id":"P","candidate_a":"x","candidate_b":"y","judge_choice":"b","oracle_choice":"tie"}"#;
        let pw = parse_pairwise(text, Format::Jsonl).unwrap();
        assert_eq!(pw.records()[0].judge_choice, Choice::B);
        assert_eq!(pw.records()[0].oracle_choice, Choice::Tie);
    }

    #[test]
    fn pairwise_record_checks() {
        let same = r#"{"prompt_id":"P","candidate_a":"x","candidate_b":"x","judge_choice":"A","oracle_choice":"A"}"#;
        assert!(matches!(
            parse_pairwise(same, Format::Jsonl),
            Err(AuditError::Validation { line: Some(1), .. })
        ));
        let prob = r#"{"prompt_id":"P","candidate_a":"x","candidate_b":"y","judge_choice":"A","oracle_choice":"A","stated_prob_a":1.3}"#;
        assert!(parse_pairwise(prob, Format::Jsonl).is_err());
        assert!(parse_pairwise("", Format::Jsonl).is_err());
    }

    #[test]
    fn select_renames_repeats() {
        let ds = parse_pointwise(D1, Format::Jsonl, false).unwrap();
        let boot = ds.select(&[1, 1, 0]);
        let ids: Vec<_> = boot.groups().iter().map(|g| g.prompt_id.as_str()).collect();
        assert_eq!(ids, ["P2", "P2#1", "P1"]);
    }
}
