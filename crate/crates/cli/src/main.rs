use clap::{Args, Parser, Subcommand};
use pmhe::analysis::{certify, AnalysisError, Status};
use pmhe::config::{ConfigError, ExperimentConfig, SchemeConfig, SystemConfig};
use pmhe::model::{build_partition, ModelError};
use pmhe::netsim::NetsimError;
use pmhe::report::{compare, compare_csv, requested_verdicts, run_experiment_to_dir, ReportError, RunError};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pmhe", version, about = "Partition-based moving-horizon estimation for coupled linear subsystems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convergence certificate for a partitioned system
    Certify(CertifyArgs),
    /// Simulate an experiment and write CSV/JSON outputs
    Run(RunArgs),
    /// Tabulate per-scheme metrics from run outputs
    Compare(CompareArgs),
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    system: PathBuf,
    /// Supplies horizon, μ and the requested schemes when given
    #[arg(long)]
    experiment: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    strict_cert: bool,
    /// Report file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    experiment: PathBuf,
    /// Output directory (default: output_dir from the experiment, else ./pmhe-out)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strict_cert: bool,
    #[arg(long)]
    horizon: Option<usize>,
    /// Overrides μ of every PMHE3 scheme
    #[arg(long)]
    mu: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Per-scheme CSV files or summary.json files
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, code: u8, message: impl ToString) -> Self {
        Failure { kind, code, message: message.to_string() }
    }
    fn usage(m: impl ToString) -> Self {
        Self::new("usage", 1, m)
    }
    fn config(m: impl ToString) -> Self {
        Self::new("config", 1, m)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::config(e)
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        Failure::config(e)
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::ScenarioMismatch { .. } => Failure::new("scenario_mismatch", 1, e),
            ReportError::Malformed { .. } => Failure::config(e),
            ReportError::Io { .. } => Failure::new("io", 1, e),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Model(e) => e.into(),
            RunError::Analysis(e) => e.into(),
            RunError::Report(e) => e.into(),
            RunError::Certification(_) => Failure::new("certification", 2, e),
            RunError::Netsim(n) => match n {
                NetsimError::Model(_) | NetsimError::Invalid(_) => Failure::config(n),
                _ => Failure::new("estimator", 3, n),
            },
        }
    }
}

fn threads() -> Result<Option<usize>, Failure> {
    match std::env::var("PMHE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| Failure::usage(format!("PMHE_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::new("io", 1, format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(path)?)
}

fn cmd_certify(a: CertifyArgs) -> Result<(), Failure> {
    let sys = build_partition(&SystemConfig::load(&a.system)?)?;
    let exp = a.experiment.as_deref().map(load_experiment).transpose()?;
    let horizon = a
        .horizon
        .or(exp.as_ref().map(|e| e.horizon))
        .ok_or_else(|| Failure::usage("certify needs --horizon or --experiment"))?;
    let strict = a.strict_cert || exp.as_ref().is_some_and(|e| e.strict_certificate);
    let (cert, requested) = match exp {
        Some(mut e) => {
            e.horizon = horizon;
            if let Some(mu) = a.mu {
                override_mu(&mut e, mu);
            }
            requested_verdicts(&sys, &e, strict)?
        }
        None => {
            let c = certify(&sys, horizon, a.mu, strict)?;
            let v = c.verdicts.clone();
            (c, v)
        }
    };
    let report = serde_json::json!({ "certificate": cert, "requested": requested });
    write_or_print(a.out.as_deref(), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    let bad: Vec<String> = requested
        .iter()
        .filter(|(_, v)| v.status == Status::Uncertified)
        .map(|(k, v)| format!("{k}: {}", v.reasons.join("; ")))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::new("certification", 2, format!("uncertified: {}", bad.join(" | "))))
    }
}

fn override_mu(e: &mut ExperimentConfig, mu: f64) {
    for s in &mut e.schemes {
        if let SchemeConfig::Pmhe3 { mu: m } = s {
            *m = mu;
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let sys_cfg = SystemConfig::load(&a.system)?;
    let mut exp = load_experiment(&a.experiment)?;
    if let Some(s) = a.seed {
        exp.seed = s;
    }
    if let Some(n) = a.horizon {
        exp.horizon = n;
    }
    if let Some(mu) = a.mu {
        override_mu(&mut exp, mu);
    }
    exp.strict_certificate |= a.strict_cert;
    exp.validate(&a.experiment)?;
    let dir = a
        .out
        .or_else(|| exp.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("pmhe-out"));
    let outcome = run_experiment_to_dir(&sys_cfg, &exp, &dir, threads()?)?;
    let terminal: BTreeMap<&str, String> = outcome
        .summary
        .schemes
        .iter()
        .map(|s| (s.label.as_str(), s.terminal_error.map_or("-".into(), |e| format!("{e:.3e}"))))
        .collect();
    for (label, e) in terminal {
        println!("{label}: terminal error {e}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    let rows = compare(&a.files)?;
    write_or_print(a.out.as_deref(), &compare_csv(&rows))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let res = match cli.cmd {
        Cmd::Certify(a) => cmd_certify(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Compare(a) => cmd_compare(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let one_line = f.message.lines().map(str::trim).collect::<Vec<_>>().join(" | ");
            eprintln!("error[{}]: {one_line}", f.kind);
            ExitCode::from(f.code)
        }
    }
}
