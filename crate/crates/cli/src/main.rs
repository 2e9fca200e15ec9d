//! `cec`: solve, simulate, sweep and diagnose certainty-equivalence
//! relaxations from the command line.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use cec_core::custom::CustomInstance;
use cec_core::diagnostics::{
    self, fit_reports, sweep_sigma, sweep_theta, write_sweep_csv, FitReport, SweepRow, PAIRED_THETAS,
};
use cec_core::netutil::{build_instance, NetworkParams};
use cec_core::policies::PolicyKind;
use cec_core::problem::{validate_instance, ProblemInstance};
use cec_core::relaxation::solve_rel_minus;
use cec_core::simulator::evaluate;
use cec_core::solver::SolverConfig;
use cec_core::Error;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

const OUTPUT_DIR_ENV: &str = "CEC_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "cec", version, about = "Certainty-equivalence relaxations and re-solving policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the deterministic relaxation from stage 1 and print the plan.
    Solve(Common),
    /// Monte Carlo evaluation of one policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        mc: MonteCarlo,
    },
    /// Evaluate one policy over a grid of noise scales.
    SweepSigma {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        mc: MonteCarlo,
        /// Comma-separated noise scales.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1,1.25,1.5,2")]
        sigma_grid: Vec<f64>,
        /// Pair the hybrid threshold with the σ grid entry by entry.
        #[arg(long)]
        paired_theta: bool,
    },
    /// Evaluate the hybrid policy over a grid of thresholds.
    SweepTheta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mc: MonteCarlo,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,1.5,2,2.5,3,4,5")]
        theta_grid: Vec<f64>,
    },
    /// Active sets, LICQ, strict complementarity and projector degeneracy.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = diagnostics::DEFAULT_TOL_ACT)]
        tol_act: f64,
        #[arg(long, default_value_t = diagnostics::DEFAULT_TOL_LAMBDA)]
        tol_lambda: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Diamond,
    CustomJson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyName {
    Update,
    Projection,
    Hybrid,
    Myopic,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, value_enum, default_value = "diamond")]
    model: Model,
    /// JSON file: network parameters for `diamond`, the instance for `custom-json`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter override `key=value` (diamond model; repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Horizon.
    #[arg(long = "T", value_parser = positive)]
    horizon: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// KKT tolerance of every solve.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Write the output here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Worker threads (default: available parallelism).
    #[arg(long, value_parser = positive)]
    threads: Option<u64>,
}

#[derive(Args, Debug)]
struct PolicyArgs {
    #[arg(long, value_enum, default_value = "update")]
    policy: PolicyName,
    /// Hybrid threshold; `inf` never re-solves.
    #[arg(long, default_value_t = 1.5)]
    theta: f64,
    /// Substream offset of the myopic policy's random directions.
    #[arg(long, default_value_t = 0)]
    myopic_offset: u64,
}

impl PolicyArgs {
    fn kind(&self) -> PolicyKind {
        match self.policy {
            PolicyName::Update => PolicyKind::Update,
            PolicyName::Projection => PolicyKind::Projection,
            PolicyName::Hybrid => PolicyKind::Hybrid { theta: self.theta },
            PolicyName::Myopic => PolicyKind::Myopic {
                seed_offset: self.myopic_offset,
            },
        }
    }
}

#[derive(Args, Debug)]
struct MonteCarlo {
    /// Replications.
    #[arg(long, default_value_t = 400, value_parser = positive)]
    reps: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn positive(s: &str) -> Result<u64, String> {
    match s.parse::<u64>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn usage_line() -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = std::env::args().nth(1);
    match sub.as_deref().and_then(|name| cmd.find_subcommand_mut(name)) {
        Some(s) => s.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

/// Errors caught after parsing: usage problems exit 2, the rest 1.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl Common {
    fn solver(&self) -> Result<SolverConfig, Failure> {
        let cfg = SolverConfig::default().with_tol(self.tol);
        cfg.check().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    fn instance(&self) -> Result<ProblemInstance, Failure> {
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(usage(format!("--sigma must be finite and nonnegative, got {s}")));
            }
        }
        match self.model {
            Model::Diamond => {
                let mut params = match &self.config {
                    Some(path) => serde_json::from_str::<NetworkParams>(&read(path)?).map_err(Error::from)?,
                    None => NetworkParams::default(),
                };
                for kv in &self.overrides {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| usage(format!("--set expects key=value, got `{kv}`")))?;
                    params.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
                }
                if let Some(t) = self.horizon {
                    params.horizon = t as usize;
                }
                if let Some(s) = self.sigma {
                    params.sigma = s;
                }
                Ok(build_instance(&params)?)
            }
            Model::CustomJson => {
                let path = self
                    .config
                    .as_ref()
                    .ok_or_else(|| usage("--model custom-json requires --config <file>"))?;
                if !self.overrides.is_empty() {
                    return Err(usage("--set only applies to the diamond model"));
                }
                let mut doc: CustomInstance = serde_json::from_str(&read(path)?).map_err(Error::from)?;
                if let Some(t) = self.horizon {
                    doc.horizon = t as usize;
                }
                let mut inst = doc.build()?;
                if let Some(s) = self.sigma {
                    inst = inst.with_sigma(s);
                }
                let report = validate_instance(&inst, 0)?;
                if !report.passed {
                    let failed: Vec<String> = report
                        .oracles
                        .iter()
                        .filter(|c| !c.passed)
                        .map(|c| format!("stage {} {} `{}`", c.stage, c.role, c.label))
                        .chain(report.slater.iter().filter(|s| !s.strictly_feasible).map(|s| format!("Slater at stage {}", s.stage)))
                        .collect();
                    return Err(Failure::Runtime(Error::InvalidParameter {
                        name: "instance".into(),
                        reason: format!("failed validation: {}", failed.join(", ")),
                    }));
                }
                Ok(inst)
            }
        }
    }
}

fn read(path: &PathBuf) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn rows_csv(rows: &[SweepRow]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write_sweep_csv(rows, &mut buf)?;
    Ok(buf)
}

fn pretty(value: &impl serde::Serialize) -> Result<Vec<u8>, Failure> {
    let mut out = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    out.push(b'\n');
    Ok(out)
}

fn fit_or_none(rows: &[cec_core::simulator::EvaluationReport]) -> Option<FitReport> {
    fit_reports(rows).ok()
}

/// Returns the command name (used for the default file name) and the bytes.
fn execute(command: &Command) -> Result<(&'static str, &Common, Vec<u8>), Failure> {
    match command {
        Command::Solve(common) => {
            let inst = common.instance()?;
            let cfg = common.solver()?;
            let plan = solve_rel_minus(&inst, 1, &inst.x1, &cfg)?;
            let bytes = match common.format {
                Format::Json => pretty(&json!({
                    "model": inst.name,
                    "T": inst.horizon(),
                    "value": plan.value,
                    "status": plan.kkt.status,
                    "iterations": plan.kkt.iters,
                    "plan": plan,
                }))?,
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    let mut header = vec!["t".to_string()];
                    header.extend((0..inst.dims.n_x).map(|k| format!("x{k}")));
                    header.extend((0..inst.dims.n_u).map(|k| format!("u{k}")));
                    w.write_record(&header).map_err(Error::from)?;
                    for t in 1..=inst.horizon() {
                        let mut rec = vec![t.to_string()];
                        rec.extend(plan.x_at(t).iter().map(f64::to_string));
                        rec.extend(plan.u_at(t).iter().map(f64::to_string));
                        w.write_record(&rec).map_err(Error::from)?;
                    }
                    w.into_inner().map_err(|e| Failure::Runtime(Error::Io(e.into_error())))?
                }
            };
            Ok(("solve", common, bytes))
        }
        Command::Simulate { common, policy, mc } => {
            let kind = policy.kind();
            kind.check().map_err(|e| usage(e.to_string()))?;
            let inst = common.instance()?;
            let cfg = common.solver()?;
            let report = evaluate(&inst, kind, mc.reps as usize, &cfg, mc.seed)?;
            let bytes = match common.format {
                Format::Json => pretty(&report)?,
                Format::Csv => rows_csv(&[SweepRow::from_report(&report)])?,
            };
            Ok(("simulate", common, bytes))
        }
        Command::SweepSigma {
            common,
            policy,
            mc,
            sigma_grid,
            paired_theta,
        } => {
            let kind = policy.kind();
            kind.check().map_err(|e| usage(e.to_string()))?;
            if sigma_grid.is_empty() || sigma_grid.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return Err(usage("--sigma-grid needs nonnegative finite values"));
            }
            if *paired_theta && sigma_grid.len() > PAIRED_THETAS.len() {
                return Err(usage(format!("--paired-theta supports at most {} grid points", PAIRED_THETAS.len())));
            }
            let inst = common.instance()?;
            let cfg = common.solver()?;
            let pairs = paired_theta.then_some(&PAIRED_THETAS[..]);
            let reports = sweep_sigma(&inst, sigma_grid, kind, pairs, mc.reps as usize, mc.seed, &cfg)?;
            let rows: Vec<SweepRow> = reports.iter().map(SweepRow::from_report).collect();
            let bytes = match common.format {
                Format::Json => pretty(&json!({
                    "v_rel_minus": reports[0].v_rel_minus,
                    "reps": mc.reps,
                    "seed": mc.seed,
                    "rows": rows,
                    "fit": fit_or_none(&reports),
                }))?,
                Format::Csv => rows_csv(&rows)?,
            };
            Ok(("sweep-sigma", common, bytes))
        }
        Command::SweepTheta { common, mc, theta_grid } => {
            if theta_grid.is_empty() || theta_grid.iter().any(|t| !(*t >= 0.0)) {
                return Err(usage("--theta-grid needs nonnegative values"));
            }
            let inst = common.instance()?;
            let cfg = common.solver()?;
            let sigma = inst.sigma();
            let reports = sweep_theta(&inst, theta_grid, sigma, mc.reps as usize, mc.seed, &cfg)?;
            let rows: Vec<SweepRow> = reports.iter().map(SweepRow::from_report).collect();
            let bytes = match common.format {
                Format::Json => pretty(&json!({
                    "v_rel_minus": reports[0].v_rel_minus,
                    "reps": mc.reps,
                    "seed": mc.seed,
                    "rows": rows,
                }))?,
                Format::Csv => rows_csv(&rows)?,
            };
            Ok(("sweep-theta", common, bytes))
        }
        Command::Diagnose {
            common,
            tol_act,
            tol_lambda,
        } => {
            if common.format == Format::Csv {
                return Err(usage("diagnose only writes json"));
            }
            if !(*tol_act > 0.0 && *tol_lambda > 0.0) {
                return Err(usage("--tol-act and --tol-lambda must be positive"));
            }
            let inst = common.instance()?;
            let cfg = common.solver()?;
            let report = diagnostics::diagnose(&inst, &cfg, *tol_act, *tol_lambda)?;
            Ok(("diagnose", common, pretty(&report)?))
        }
    }
}

fn common_of(command: &Command) -> &Common {
    match command {
        Command::Solve(c) => c,
        Command::Simulate { common, .. }
        | Command::SweepSigma { common, .. }
        | Command::SweepTheta { common, .. }
        | Command::Diagnose { common, .. } => common,
    }
}

fn emit(name: &str, common: &Common, bytes: &[u8]) -> std::io::Result<()> {
    let ext = match common.format {
        Format::Json => "json",
        Format::Csv => "csv",
    };
    let path = match (&common.output, std::env::var_os(OUTPUT_DIR_ENV)) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) => Some(PathBuf::from(dir).join(format!("{name}.{ext}"))),
        (None, None) => None,
    };
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&p, bytes)?;
            eprintln!("wrote {}", p.display());
            Ok(())
        }
        None => std::io::stdout().lock().write_all(bytes),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", usage_line());
            }
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    if let Some(n) = common_of(&cli.command).threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = execute(&cli.command).and_then(|(name, common, bytes)| {
        emit(name, common, &bytes).map_err(|e| Failure::Runtime(Error::Io(e)))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}\nFor more information, try '--help'.", usage_line());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
