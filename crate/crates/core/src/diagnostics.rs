//! Regularity checks on relaxed solutions and the experiment drivers:
//! noise-scale sweeps, threshold sweeps and gap-rate fits.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policies::{solve_projection, PolicyKind};
use crate::problem::ProblemInstance;
use crate::relaxation::{build_rel_minus, solve_rel_minus, RelaxedPlan};
use crate::simulator::{evaluate_with_plan, EvaluationReport};
use crate::solver::{ConvexProgram, KktSolution, SolverConfig};

pub const DEFAULT_TOL_ACT: f64 = 1e-6;
pub const DEFAULT_TOL_LAMBDA: f64 = 1e-6;
/// Relative singular-value cutoff for numerical rank.
pub const RANK_TOL: f64 = 1e-8;

fn require_optimal(kkt: &KktSolution) -> Result<()> {
    if kkt.is_optimal() {
        Ok(())
    } else {
        Err(Error::NotOptimal {
            status: kkt.status,
            iters: kkt.iters,
        })
    }
}

fn stages_of(program: &ConvexProgram) -> Vec<usize> {
    let mut s: Vec<usize> = program.inequalities.iter().map(|t| t.stage).collect();
    s.extend(&program.eq_stage);
    s.sort_unstable();
    s.dedup();
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageActiveSet {
    pub stage: usize,
    /// Indices into the program's inequality list, ascending.
    pub active: Vec<usize>,
    pub labels: Vec<String>,
    pub lambda: Vec<f64>,
    /// Smallest `−g_i` over inactive constraints (infinite if none).
    pub inactive_min_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSetReport {
    pub tol_act: f64,
    pub stages: Vec<StageActiveSet>,
}

impl ActiveSetReport {
    pub fn all_active(&self) -> Vec<usize> {
        self.stages.iter().flat_map(|s| s.active.iter().copied()).collect()
    }
}

/// Inequalities with `|g_i(z)| ≤ tol_act`, grouped by stage.
pub fn active_set(program: &ConvexProgram, kkt: &KktSolution, tol_act: f64) -> Result<ActiveSetReport> {
    require_optimal(kkt)?;
    let g = program.inequality_values(&kkt.z);
    let stages = stages_of(program)
        .into_iter()
        .map(|stage| {
            let mut rep = StageActiveSet {
                stage,
                active: Vec::new(),
                labels: Vec::new(),
                lambda: Vec::new(),
                inactive_min_margin: f64::INFINITY,
            };
            for (i, term) in program.inequalities.iter().enumerate().filter(|(_, t)| t.stage == stage) {
                if g[i].abs() <= tol_act {
                    rep.active.push(i);
                    rep.labels.push(term.label());
                    rep.lambda.push(kkt.lambda[i]);
                } else {
                    rep.inactive_min_margin = rep.inactive_min_margin.min(-g[i]);
                }
            }
            rep
        })
        .collect();
    Ok(ActiveSetReport { tol_act, stages })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEvidence {
    pub rows: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub holds: bool,
}

/// Numerical rank of the given rows: singular values above
/// `RANK_TOL · σ_max`.
pub fn rank_evidence(rows: &[Vec<f64>], n: usize) -> RankEvidence {
    if rows.is_empty() {
        return RankEvidence {
            rows: 0,
            rank: 0,
            singular_values: Vec::new(),
            holds: true,
        };
    }
    let m = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let cutoff = RANK_TOL * sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > cutoff && s > 0.0).count();
    RankEvidence {
        rows: rows.len(),
        rank,
        singular_values: sv,
        holds: rank == rows.len(),
    }
}

fn dense(row: &[(usize, f64)], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for &(i, v) in row {
        out[i] += v;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LicqReport {
    pub holds: bool,
    pub global: RankEvidence,
    /// Per stage: that stage's active inequality gradients and equality rows.
    pub stages: Vec<(usize, RankEvidence)>,
}

/// LICQ: gradients of the active inequalities and all equality rows are
/// linearly independent.
pub fn check_licq(program: &ConvexProgram, kkt: &KktSolution, tol_act: f64) -> Result<LicqReport> {
    let act = active_set(program, kkt, tol_act)?;
    let n = program.n;
    let grad_row = |i: usize| dense(&program.inequalities[i].gradient(&kkt.z), n);
    let mut all: Vec<Vec<f64>> = act.all_active().into_iter().map(grad_row).collect();
    all.extend(program.eq_rows.iter().map(|r| dense(r, n)));
    let global = rank_evidence(&all, n);
    let stages = act
        .stages
        .iter()
        .map(|s| {
            let mut rows: Vec<Vec<f64>> = s.active.iter().map(|&i| grad_row(i)).collect();
            rows.extend(
                program
                    .eq_rows
                    .iter()
                    .zip(&program.eq_stage)
                    .filter(|(_, &st)| st == s.stage)
                    .map(|(r, _)| dense(r, n)),
            );
            (s.stage, rank_evidence(&rows, n))
        })
        .collect();
    Ok(LicqReport {
        holds: global.holds,
        global,
        stages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictComplementarityReport {
    pub holds: bool,
    /// Smallest multiplier over active constraints (infinite if none).
    pub min_active_lambda: f64,
    pub stages: Vec<(usize, bool, f64)>,
}

/// Every active constraint carries `λ_i > tol_lambda`.
pub fn check_strict_complementarity(
    program: &ConvexProgram,
    kkt: &KktSolution,
    tol_act: f64,
    tol_lambda: f64,
) -> Result<StrictComplementarityReport> {
    let act = active_set(program, kkt, tol_act)?;
    let stages: Vec<(usize, bool, f64)> = act
        .stages
        .iter()
        .map(|s| {
            let min = s.lambda.iter().copied().fold(f64::INFINITY, f64::min);
            (s.stage, min > tol_lambda, min)
        })
        .collect();
    let min_active_lambda = stages.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
    Ok(StrictComplementarityReport {
        holds: stages.iter().all(|s| s.1),
        min_active_lambda,
        stages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDegeneracy {
    pub t: usize,
    pub degenerate: bool,
    pub projected: Vec<f64>,
    pub active_labels: Vec<String>,
    pub active_lambda: Vec<f64>,
    pub min_active_lambda: f64,
    pub solve_tol: f64,
}

/// Solve tolerance used for the projection in the degeneracy check: zero
/// multipliers must come out well below `tol_lambda`.
pub const PROJECTION_CHECK_TOL: f64 = 1e-13;

/// The projector at `u_target` is non-degenerate iff its KKT point is
/// strictly complementary.
#[allow(clippy::too_many_arguments)]
pub fn check_projection_degeneracy(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    u_target: &[f64],
    config: &SolverConfig,
    tol_act: f64,
    tol_lambda: f64,
) -> Result<ProjectionDegeneracy> {
    let solve_tol = config.tol_kkt.min(PROJECTION_CHECK_TOL);
    let tight = SolverConfig {
        tol_kkt: solve_tol,
        max_newton: config.max_newton.max(400),
        ..config.clone()
    };
    let (program, kkt) = solve_projection(instance, t, x, w, u_target, &tight)?;
    let act = active_set(&program, &kkt, tol_act)?;
    let sc = check_strict_complementarity(&program, &kkt, tol_act, tol_lambda)?;
    let stage = act.stages.into_iter().next();
    let (active_labels, active_lambda) = stage.map(|s| (s.labels, s.lambda)).unwrap_or_default();
    Ok(ProjectionDegeneracy {
        t,
        degenerate: !sc.holds,
        projected: kkt.z,
        active_labels,
        active_lambda,
        min_active_lambda: sc.min_active_lambda,
        solve_tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRegularity {
    pub stage: usize,
    pub active_labels: Vec<String>,
    pub active_lambda: Vec<f64>,
    pub inactive_min_margin: f64,
    pub licq: bool,
    pub rank: usize,
    pub rows: usize,
    pub strict_comp: bool,
    pub min_active_lambda: f64,
    pub nondegenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub tol_act: f64,
    pub tol_lambda: f64,
    pub value: f64,
    pub stages: Vec<StageRegularity>,
    pub licq: bool,
    pub strict_comp: bool,
    pub nondegenerate: bool,
    pub projection_t1: ProjectionDegeneracy,
}

/// Regularity of the `V_rel−` solution from stage 1 plus the projector
/// degeneracy check at `t = 1`, `u_target = u*(1)`.
pub fn diagnose(
    instance: &ProblemInstance,
    config: &SolverConfig,
    tol_act: f64,
    tol_lambda: f64,
) -> Result<RegularityReport> {
    let plan = solve_rel_minus(instance, 1, &instance.x1, config)?;
    regularity_of_plan(instance, &plan, config, tol_act, tol_lambda)
}

pub fn regularity_of_plan(
    instance: &ProblemInstance,
    plan: &RelaxedPlan,
    config: &SolverConfig,
    tol_act: f64,
    tol_lambda: f64,
) -> Result<RegularityReport> {
    let program = build_rel_minus(instance, plan.t_start, plan.x_at(plan.t_start))?;
    let kkt = &plan.kkt;
    let act = active_set(&program, kkt, tol_act)?;
    let licq = check_licq(&program, kkt, tol_act)?;
    let sc = check_strict_complementarity(&program, kkt, tol_act, tol_lambda)?;
    let stages: Vec<StageRegularity> = act
        .stages
        .into_iter()
        .zip(&licq.stages)
        .zip(&sc.stages)
        .map(|((a, (_, rank)), &(_, strict, min_l))| StageRegularity {
            stage: a.stage,
            active_labels: a.labels,
            active_lambda: a.lambda,
            inactive_min_margin: a.inactive_min_margin,
            licq: rank.holds,
            rank: rank.rank,
            rows: rank.rows,
            strict_comp: strict,
            min_active_lambda: min_l,
            nondegenerate: rank.holds && strict,
        })
        .collect();
    let t = plan.t_start;
    let projection_t1 = check_projection_degeneracy(
        instance,
        t,
        plan.x_at(t),
        instance.wbar(),
        plan.u_at(t),
        config,
        tol_act,
        tol_lambda,
    )?;
    let nondegenerate = licq.holds && sc.holds;
    assert!(stages.iter().all(|s| !s.nondegenerate || s.strict_comp));
    Ok(RegularityReport {
        tol_act,
        tol_lambda,
        value: plan.value,
        licq: licq.holds,
        strict_comp: sc.holds,
        nondegenerate,
        stages,
        projection_t1,
    })
}

/// One row of a sweep table; `theta` is empty for non-hybrid policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub sigma: f64,
    pub theta: Option<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub gap: f64,
    pub resolves: f64,
}

impl SweepRow {
    pub fn from_report(r: &EvaluationReport) -> Self {
        Self {
            policy: r.policy.name().to_string(),
            sigma: r.sigma,
            theta: r.policy.theta(),
            mean: r.mean,
            stderr: r.stderr,
            gap: r.gap_bound,
            resolves: r.mean_resolves,
        }
    }
}

/// The threshold list paired index-by-index with an ascending σ grid.
pub const PAIRED_THETAS: [f64; 8] = [0.4, 0.8, 1.2, 1.6, 2.0, 2.5, 3.0, 4.0];

/// Evaluates `policy` at every σ of the grid; `V_rel−` is solved once.
///
/// For a hybrid policy, `paired_thetas` (if given) overrides its threshold
/// with the entry of the same index.
#[allow(clippy::too_many_arguments)]
pub fn sweep_sigma(
    template: &ProblemInstance,
    sigma_grid: &[f64],
    policy: PolicyKind,
    paired_thetas: Option<&[f64]>,
    m: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<Vec<EvaluationReport>> {
    if sigma_grid.is_empty() {
        return Err(Error::param("sigma grid", "must not be empty"));
    }
    if let Some(th) = paired_thetas {
        if th.len() < sigma_grid.len() {
            return Err(Error::dim("paired thetas", sigma_grid.len(), th.len()));
        }
    }
    let plan = Arc::new(solve_rel_minus(template, 1, &template.x1, config)?);
    sigma_grid
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let policy = match (policy, paired_thetas) {
                (PolicyKind::Hybrid { .. }, Some(th)) => PolicyKind::Hybrid { theta: th[i] },
                (p, _) => p,
            };
            evaluate_with_plan(&template.with_sigma(sigma), policy, m, config, seed, plan.clone())
        })
        .collect()
}

/// Hybrid policy at every threshold of the grid, same seed throughout.
pub fn sweep_theta(
    instance: &ProblemInstance,
    theta_grid: &[f64],
    sigma: f64,
    m: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<Vec<EvaluationReport>> {
    if theta_grid.is_empty() {
        return Err(Error::param("theta grid", "must not be empty"));
    }
    let instance = instance.with_sigma(sigma);
    let plan = Arc::new(solve_rel_minus(&instance, 1, &instance.x1, config)?);
    theta_grid
        .iter()
        .map(|&theta| evaluate_with_plan(&instance, PolicyKind::Hybrid { theta }, m, config, seed, plan.clone()))
        .collect()
}

pub const CSV_HEADER: [&str; 7] = ["policy", "sigma", "theta", "mean", "stderr", "gap", "resolves"];

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.sigma.to_string(),
            r.theta.map(|t| t.to_string()).unwrap_or_default(),
            r.mean.to_string(),
            r.stderr.to_string(),
            r.gap.to_string(),
            r.resolves.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::param("csv header", format!("expected {CSV_HEADER:?}, got {header:?}")));
    }
    let num = |s: &str, name: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::param(name.to_string(), format!("`{s}` is not a number")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(SweepRow {
            policy: rec[0].to_string(),
            sigma: num(&rec[1], "sigma")?,
            theta: if rec[2].is_empty() { None } else { Some(num(&rec[2], "theta")?) },
            mean: num(&rec[3], "mean")?,
            stderr: num(&rec[4], "stderr")?,
            gap: num(&rec[5], "gap")?,
            resolves: num(&rec[6], "resolves")?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub sigma: Vec<f64>,
    pub gap: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `gap ≈ a·σ`
    pub a: f64,
    pub rmse_linear: f64,
    /// `gap ≈ b·σ²`
    pub b: f64,
    pub rmse_quadratic: f64,
    pub preferred: RateModel,
}

/// Least-squares fits through the origin of `gap ≈ a·σ` and `gap ≈ b·σ²`.
pub fn fit_rates(sigma: &[f64], gap: &[f64], stderr: &[f64]) -> Result<FitReport> {
    if sigma.len() != gap.len() {
        return Err(Error::dim("gap", sigma.len(), gap.len()));
    }
    if stderr.len() != sigma.len() {
        return Err(Error::dim("stderr", sigma.len(), stderr.len()));
    }
    if sigma.iter().filter(|s| **s > 0.0).count() < 3 {
        return Err(Error::param("sigma grid", "need at least 3 points with positive sigma"));
    }
    let s2: f64 = sigma.iter().map(|s| s * s).sum();
    let s4: f64 = sigma.iter().map(|s| s.powi(4)).sum();
    let a = sigma.iter().zip(gap).map(|(s, g)| s * g).sum::<f64>() / s2;
    let b = sigma.iter().zip(gap).map(|(s, g)| s * s * g).sum::<f64>() / s4;
    let n = sigma.len() as f64;
    let rmse = |f: &dyn Fn(f64) -> f64| {
        (sigma.iter().zip(gap).map(|(s, g)| (g - f(*s)).powi(2)).sum::<f64>() / n).sqrt()
    };
    let rmse_linear = rmse(&|s| a * s);
    let rmse_quadratic = rmse(&|s| b * s * s);
    Ok(FitReport {
        sigma: sigma.to_vec(),
        gap: gap.to_vec(),
        stderr: stderr.to_vec(),
        a,
        rmse_linear,
        b,
        rmse_quadratic,
        preferred: if rmse_quadratic < rmse_linear {
            RateModel::Quadratic
        } else {
            RateModel::Linear
        },
    })
}

pub fn fit_reports(reports: &[EvaluationReport]) -> Result<FitReport> {
    let sigma: Vec<f64> = reports.iter().map(|r| r.sigma).collect();
    let gap: Vec<f64> = reports.iter().map(|r| r.gap_bound).collect();
    let stderr: Vec<f64> = reports.iter().map(|r| r.stderr).collect();
    fit_rates(&sigma, &gap, &stderr)
}
