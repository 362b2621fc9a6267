//! Output files of a run (per-scheme CSV, JSON summary, timing) and the
//! cross-run comparison table.

use crate::analysis::{certify, AnalysisError, ConvergenceCertificate, Status, Verdict};
use crate::config::{ExperimentConfig, SchemeConfig, SystemConfig};
use crate::netsim::{message_audit, CommReport, NetsimError, RunOptions, RunTrace, Scenario};
use crate::model::{build_partition, ModelError, PartitionedSystem};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: malformed trace: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("scenario mismatch: {first} has {a}, {second} has {b}")]
    ScenarioMismatch { first: PathBuf, a: String, second: PathBuf, b: String },
}

fn io(path: &Path, e: impl ToString) -> ReportError {
    ReportError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// 17 significant digits, '.' decimal.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

/// SHA-256 over the canonical system and experiment texts (output location excluded).
pub fn scenario_hash(sys: &SystemConfig, exp: &ExperimentConfig) -> String {
    let mut e = exp.clone();
    e.output_dir = None;
    let mut h = Sha256::new();
    h.update(sys.to_canonical_string().as_bytes());
    h.update([0u8]);
    h.update(e.to_canonical_string().as_bytes());
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub label: String,
    pub rounds: usize,
    pub terminal_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub total_messages: usize,
    pub total_bytes: usize,
    pub total_qp_iterations: usize,
    pub violations: usize,
    pub theta_bound: Option<f64>,
    pub max_diff_to_ref: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub horizon: usize,
    pub rounds: usize,
    pub subsystems: usize,
    pub schemes: Vec<SchemeSummary>,
    pub audit: CommReport,
    pub certificate: Option<ConvergenceCertificate>,
    pub verdicts: BTreeMap<String, Verdict>,
}

pub fn summarize(trace: &RunTrace) -> Vec<SchemeSummary> {
    let audit = message_audit(trace);
    trace
        .schemes
        .iter()
        .zip(&audit.schemes)
        .map(|(s, a)| {
            let errs: Vec<f64> = s.rounds.iter().map(|r| r.err_total).collect();
            SchemeSummary {
                label: s.label.clone(),
                rounds: s.rounds.len(),
                terminal_error: errs.last().copied(),
                mean_error: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
                total_messages: a.messages,
                total_bytes: a.bytes,
                total_qp_iterations: s.rounds.iter().map(|r| r.qp_iterations).sum(),
                violations: s.rounds.iter().map(|r| r.violations).sum(),
                theta_bound: s.theta_bound,
                max_diff_to_ref: s.rounds.iter().map(|r| r.diff_to_ref).reduce(f64::max),
            }
        })
        .collect()
}

pub fn csv_header(m: usize) -> String {
    let mut h = String::from("round");
    for i in 0..m {
        let _ = write!(h, ",err_{i}");
    }
    h.push_str(",err_total,theta,stage_cost,diff_to_ref,qp_iterations,messages,bytes");
    h
}

/// Per-scheme CSV; the first line tags the scenario and scheme.
pub fn scheme_csv(hash: &str, trace: &RunTrace, idx: usize, m: usize) -> String {
    let s = &trace.schemes[idx];
    let mut out = format!("# scenario={hash} scheme={}\n{}\n", s.label, csv_header(m));
    for r in &s.rounds {
        let _ = write!(out, "{}", r.t);
        for e in &r.err_sub {
            let _ = write!(out, ",{}", real(*e));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{}",
            real(r.err_total),
            real(r.theta),
            real(r.stage_cost),
            real(r.diff_to_ref),
            r.qp_iterations,
            r.messages,
            r.bytes
        );
    }
    out
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("certification failed: {0}")]
    Certification(String),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// Certificate statuses of the distributed schemes in the experiment; one
/// certificate per distinct μ (PMHE3) plus the μ-free one.
pub fn requested_verdicts(
    sys: &PartitionedSystem,
    exp: &ExperimentConfig,
    strict: bool,
) -> Result<(ConvergenceCertificate, BTreeMap<String, Verdict>), AnalysisError> {
    let first_mu = exp.schemes.iter().find_map(|s| match s {
        SchemeConfig::Pmhe3 { mu } => Some(*mu),
        _ => None,
    });
    let base = certify(sys, exp.horizon, first_mu, strict)?;
    let mut out = BTreeMap::new();
    for s in &exp.schemes {
        match s {
            SchemeConfig::Pmhe1 { choice } => {
                out.insert(format!("pmhe1-{choice:?}"), base.verdicts["pmhe1"].clone());
            }
            SchemeConfig::Pmhe2 { choice } => {
                out.insert(format!("pmhe2-{choice:?}"), base.verdicts["pmhe2"].clone());
            }
            SchemeConfig::Pmhe3 { mu } => {
                let v = if Some(*mu) == first_mu {
                    base.verdicts["pmhe3"].clone()
                } else {
                    certify(sys, exp.horizon, Some(*mu), strict)?.verdicts["pmhe3"].clone()
                };
                out.insert(format!("pmhe3(mu={mu})"), v);
            }
            SchemeConfig::CentralizedKf | SchemeConfig::CentralizedMhe => {}
        }
    }
    Ok((base, out))
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub trace: RunTrace,
    pub files: Vec<PathBuf>,
}

/// Certify, simulate and write `<label>.csv`, `summary.json` and `timing.json` into `dir`.
pub fn run_experiment_to_dir(
    sys_cfg: &SystemConfig,
    exp: &ExperimentConfig,
    dir: &Path,
    threads: Option<usize>,
) -> Result<RunOutcome, RunError> {
    let sys = build_partition(sys_cfg)?;
    let hash = scenario_hash(sys_cfg, exp);
    let (cert, verdicts) = match requested_verdicts(&sys, exp, exp.strict_certificate) {
        Ok((c, v)) => (Some(c), v),
        Err(_) if !exp.strict_certificate => (None, BTreeMap::new()),
        Err(e) => return Err(e.into()),
    };
    if exp.strict_certificate {
        let bad: Vec<String> = verdicts
            .iter()
            .filter(|(_, v)| v.status == Status::Uncertified)
            .map(|(k, v)| format!("{k}: {}", v.reasons.join("; ")))
            .collect();
        if !bad.is_empty() {
            return Err(RunError::Certification(bad.join(" | ")));
        }
    }
    let sc = Scenario::new(sys.clone(), exp)?;
    let trace = crate::netsim::run(&sc, RunOptions { threads, record_inputs: false })?;
    let summary = RunSummary {
        scenario: hash.clone(),
        horizon: exp.horizon,
        rounds: exp.rounds,
        subsystems: sys.m(),
        schemes: summarize(&trace),
        audit: message_audit(&trace),
        certificate: cert,
        verdicts,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut files = vec![];
    let mut put = |name: String, text: String| -> Result<(), ReportError> {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io(&p, e))?;
        files.push(p);
        Ok(())
    };
    for (k, s) in trace.schemes.iter().enumerate() {
        put(format!("{}.csv", s.label), scheme_csv(&hash, &trace, k, sys.m()))?;
    }
    put("summary.json".into(), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    let timing: BTreeMap<&str, f64> = trace.schemes.iter().map(|s| (s.label.as_str(), s.wall_seconds)).collect();
    put("timing.json".into(), serde_json::to_string_pretty(&timing).expect("timing serializes") + "\n")?;
    Ok(RunOutcome { summary, trace, files })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub source: PathBuf,
    pub scenario: String,
    pub label: String,
    pub terminal_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub total_bytes: usize,
    pub total_qp_iterations: usize,
    pub wall_seconds: Option<f64>,
}

fn wall_time(path: &Path, label: &str) -> Option<f64> {
    let t = std::fs::read_to_string(path.with_file_name("timing.json")).ok()?;
    let map: BTreeMap<String, f64> = serde_json::from_str(&t).ok()?;
    map.get(label).copied()
}

fn rows_from_csv(path: &Path, text: &str) -> Result<CompareRow, ReportError> {
    let bad = |m: &str| ReportError::Malformed { path: path.to_path_buf(), message: m.to_string() };
    let mut lines = text.lines();
    let tag = lines.next().ok_or_else(|| bad("empty file"))?;
    let mut scenario = None;
    let mut label = None;
    for part in tag.trim_start_matches('#').split_whitespace() {
        if let Some(v) = part.strip_prefix("scenario=") {
            scenario = Some(v.to_string());
        } else if let Some(v) = part.strip_prefix("scheme=") {
            label = Some(v.to_string());
        }
    }
    let (scenario, label) = (scenario.ok_or_else(|| bad("missing scenario tag"))?, label.ok_or_else(|| bad("missing scheme tag"))?);
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("missing header"))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| bad(&format!("missing column {name}")));
    let (ce, cq, cb) = (col("err_total")?, col("qp_iterations")?, col("bytes")?);
    let mut errs = vec![];
    let (mut qp, mut bytes) = (0usize, 0usize);
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(bad("ragged row"));
        }
        errs.push(f[ce].parse::<f64>().map_err(|_| bad("bad err_total"))?);
        qp += f[cq].parse::<usize>().map_err(|_| bad("bad qp_iterations"))?;
        bytes += f[cb].parse::<usize>().map_err(|_| bad("bad bytes"))?;
    }
    Ok(CompareRow {
        source: path.to_path_buf(),
        wall_seconds: wall_time(path, &label),
        scenario,
        terminal_error: errs.last().copied(),
        mean_error: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
        label,
        total_bytes: bytes,
        total_qp_iterations: qp,
    })
}

/// Rows for per-scheme CSV files or run summaries; all inputs must share one scenario.
pub fn compare(paths: &[PathBuf]) -> Result<Vec<CompareRow>, ReportError> {
    let mut rows: Vec<CompareRow> = vec![];
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
        if p.extension().is_some_and(|e| e == "json") {
            let s: RunSummary = serde_json::from_str(&text)
                .map_err(|e| ReportError::Malformed { path: p.clone(), message: e.to_string() })?;
            for sc in s.schemes {
                rows.push(CompareRow {
                    source: p.clone(),
                    scenario: s.scenario.clone(),
                    wall_seconds: wall_time(p, &sc.label),
                    label: sc.label,
                    terminal_error: sc.terminal_error,
                    mean_error: sc.mean_error,
                    total_bytes: sc.total_bytes,
                    total_qp_iterations: sc.total_qp_iterations,
                });
            }
        } else {
            rows.push(rows_from_csv(p, &text)?);
        }
    }
    if let Some(first) = rows.first() {
        if let Some(other) = rows.iter().find(|r| r.scenario != first.scenario) {
            return Err(ReportError::ScenarioMismatch {
                first: first.source.clone(),
                a: first.scenario.clone(),
                second: other.source.clone(),
                b: other.scenario.clone(),
            });
        }
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let opt = |x: Option<f64>| x.map(real).unwrap_or_default();
    let mut out = String::from("scheme,terminal_error,mean_error,total_bytes,total_qp_iterations,wall_seconds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label,
            opt(r.terminal_error),
            opt(r.mean_error),
            r.total_bytes,
            r.total_qp_iterations,
            opt(r.wall_seconds)
        );
    }
    out
}
