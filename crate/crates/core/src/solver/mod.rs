//! Smooth convex programs and a primal-dual log-barrier interior-point
//! solver.
//!
//! Programs are `minimize Σ objective terms` subject to convex inequality
//! terms `g_i(z) ≤ 0` and affine equalities `A z = b`. Every term is a
//! [`SmoothOracle`] evaluated through a slot map that either reads a
//! decision variable or substitutes a frozen constant.

mod banded;
mod ipm;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{AffineOracle, Curvature, SmoothOracle};

pub use ipm::IterationTrace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Var(usize),
    Fixed(f64),
}

/// A scaled oracle wired into the variable vector of a program.
#[derive(Debug, Clone)]
pub struct Term {
    pub oracle: Arc<dyn SmoothOracle>,
    pub slots: Vec<Slot>,
    pub scale: f64,
    /// Stage the term belongs to; used for KKT ordering and reporting.
    pub stage: usize,
}

impl Term {
    pub fn new(oracle: Arc<dyn SmoothOracle>, slots: Vec<Slot>, scale: f64, stage: usize) -> Self {
        Self {
            oracle,
            slots,
            scale,
            stage,
        }
    }

    pub fn label(&self) -> String {
        self.oracle.label()
    }

    pub(crate) fn gather(&self, z: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.slots.iter().map(|s| match *s {
            Slot::Var(i) => z[i],
            Slot::Fixed(c) => c,
        }));
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.slots.len());
        self.gather(z, &mut buf);
        self.scale * self.oracle.value(&buf)
    }

    pub fn in_domain(&self, z: &[f64]) -> bool {
        let mut buf = Vec::with_capacity(self.slots.len());
        self.gather(z, &mut buf);
        self.oracle.in_domain(&buf)
    }

    /// Sparse gradient with respect to the program variables.
    pub fn gradient(&self, z: &[f64]) -> Vec<(usize, f64)> {
        let mut buf = Vec::with_capacity(self.slots.len());
        self.gather(z, &mut buf);
        let mut g = vec![0.0; buf.len()];
        self.oracle.gradient(&buf, &mut g);
        let mut out: Vec<(usize, f64)> = Vec::new();
        for (k, s) in self.slots.iter().enumerate() {
            if let Slot::Var(i) = *s {
                match out.iter_mut().find(|(j, _)| *j == i) {
                    Some(e) => e.1 += self.scale * g[k],
                    None => out.push((i, self.scale * g[k])),
                }
            }
        }
        out
    }

    fn var_slots(&self) -> Vec<(usize, usize)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(k, s)| match *s {
                Slot::Var(i) => Some((k, i)),
                Slot::Fixed(_) => None,
            })
            .collect()
    }
}

/// Sparse row of the equality matrix.
pub type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Clone, Default)]
pub struct ConvexProgram {
    pub n: usize,
    pub objective: Vec<Term>,
    pub inequalities: Vec<Term>,
    pub eq_rows: Vec<SparseRow>,
    pub eq_rhs: Vec<f64>,
    /// Ordering key per variable; variables and equality rows sharing a key
    /// are placed next to each other in the KKT matrix.
    pub var_stage: Vec<usize>,
    pub eq_stage: Vec<usize>,
    /// Optional starting point; used only if strictly feasible.
    pub start: Option<Vec<f64>>,
}

impl ConvexProgram {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            var_stage: vec![0; n],
            ..Default::default()
        }
    }

    pub fn add_objective(&mut self, term: Term) {
        self.objective.push(term);
    }

    pub fn add_inequality(&mut self, term: Term) {
        self.inequalities.push(term);
    }

    pub fn add_equality(&mut self, row: SparseRow, rhs: f64, stage: usize) {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
        self.eq_stage.push(stage);
    }

    /// Adds an affine term `h(z) = 0` as an equality row.
    pub fn add_affine_equality(&mut self, term: &Term) -> Result<()> {
        if term.oracle.curvature() != Curvature::Affine {
            return Err(Error::CurvatureTag {
                oracle: term.label(),
                tag: term.oracle.curvature().to_string(),
                detail: "equality constraints must be affine".into(),
            });
        }
        let zeros = vec![0.0; self.n];
        let row = term.gradient(&zeros);
        let offset = term.value(&zeros);
        self.add_equality(row, -offset, term.stage);
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.inequalities.len()
    }

    pub fn p(&self) -> usize {
        self.eq_rows.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.var_stage.len() != self.n {
            return Err(Error::dim("var_stage", self.n, self.var_stage.len()));
        }
        if self.eq_rhs.len() != self.eq_rows.len() {
            return Err(Error::dim("eq_rhs", self.eq_rows.len(), self.eq_rhs.len()));
        }
        if self.eq_stage.len() != self.eq_rows.len() {
            return Err(Error::dim("eq_stage", self.eq_rows.len(), self.eq_stage.len()));
        }
        for term in self.objective.iter().chain(&self.inequalities) {
            if term.slots.len() != term.oracle.dim() {
                return Err(Error::dim(
                    format!("slots of `{}`", term.label()),
                    term.oracle.dim(),
                    term.slots.len(),
                ));
            }
            for s in &term.slots {
                if let Slot::Var(i) = *s {
                    if i >= self.n {
                        return Err(Error::dim(format!("variable index in `{}`", term.label()), self.n, i));
                    }
                }
            }
        }
        for row in &self.eq_rows {
            if let Some(&(i, _)) = row.iter().find(|(i, _)| *i >= self.n) {
                return Err(Error::dim("equality row index", self.n, i));
            }
        }
        if let Some(s) = &self.start {
            if s.len() != self.n {
                return Err(Error::dim("start", self.n, s.len()));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, z: &[f64]) -> f64 {
        self.objective.iter().map(|t| t.value(z)).sum()
    }

    pub fn inequality_values(&self, z: &[f64]) -> Vec<f64> {
        self.inequalities.iter().map(|t| t.value(z)).collect()
    }

    pub fn in_domain(&self, z: &[f64]) -> bool {
        self.objective
            .iter()
            .chain(&self.inequalities)
            .all(|t| t.in_domain(z))
    }

    pub fn eq_residual(&self, z: &[f64]) -> Vec<f64> {
        self.eq_rows
            .iter()
            .zip(&self.eq_rhs)
            .map(|(row, b)| row.iter().map(|&(i, a)| a * z[i]).sum::<f64>() - b)
            .collect()
    }

    /// Strict feasibility: inside every domain, every `g_i < 0`.
    pub fn is_strictly_feasible(&self, z: &[f64]) -> bool {
        z.len() == self.n
            && self.in_domain(z)
            && self.inequalities.iter().all(|t| t.value(z) < 0.0)
    }

    pub fn objective_gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for t in &self.objective {
            for (i, v) in t.gradient(z) {
                g[i] += v;
            }
        }
        g
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverConfig {
    /// Residual tolerance for stationarity, feasibility and the surrogate
    /// duality gap.
    pub tol_kkt: f64,
    /// Barrier weight is set to `barrier_mult · m / gap` each iteration.
    pub barrier_mult: f64,
    /// Initial barrier weight; initial multipliers are `1/(t0·(−g_i))`.
    pub t0: f64,
    /// Cap on primal-dual Newton iterations per solve.
    pub max_newton: usize,
    pub ls_alpha: f64,
    pub ls_beta: f64,
    /// Fraction-to-boundary factor on the multiplier step.
    pub ftb: f64,
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-8,
            barrier_mult: 10.0,
            t0: 1.0,
            max_newton: 200,
            ls_alpha: 0.1,
            ls_beta: 0.5,
            ftb: 0.99,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol_kkt = tol;
        self
    }

    pub fn check(&self) -> Result<()> {
        let positive = [
            ("tol_kkt", self.tol_kkt),
            ("barrier_mult", self.barrier_mult),
            ("t0", self.t0),
            ("ls_alpha", self.ls_alpha),
            ("ls_beta", self.ls_beta),
            ("ftb", self.ftb),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be positive and finite"));
            }
        }
        if self.barrier_mult <= 1.0 {
            return Err(Error::param("barrier_mult", "must exceed 1"));
        }
        if self.ls_alpha >= 0.5 {
            return Err(Error::param("ls_alpha", "must be below 0.5"));
        }
        if self.ls_beta >= 1.0 {
            return Err(Error::param("ls_beta", "must be below 1"));
        }
        if self.ftb >= 1.0 {
            return Err(Error::param("ftb", "must be below 1"));
        }
        if self.max_newton == 0 {
            return Err(Error::param("max_newton", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
    DomainEscape,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktSolution {
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub value: f64,
    pub r_stat: f64,
    pub r_feas: f64,
    pub r_comp: f64,
    pub iters: usize,
    pub status: SolveStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<IterationTrace>,
}

impl KktSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn into_optimal(self) -> Result<Self> {
        if self.is_optimal() {
            Ok(self)
        } else {
            Err(Error::NotOptimal {
                status: self.status,
                iters: self.iters,
            })
        }
    }
}

/// Residual norms `(stationarity, feasibility, complementarity)`:
/// `‖∇f + Σλ_i∇g_i + Aᵀμ‖`, `‖(Az − b, max(g, 0))‖`, `‖λ ∘ g‖`.
pub fn kkt_residual(program: &ConvexProgram, z: &[f64], lambda: &[f64], mu: &[f64]) -> Result<(f64, f64, f64)> {
    if z.len() != program.n {
        return Err(Error::dim("z", program.n, z.len()));
    }
    if lambda.len() != program.m() {
        return Err(Error::dim("lambda", program.m(), lambda.len()));
    }
    if mu.len() != program.p() {
        return Err(Error::dim("mu", program.p(), mu.len()));
    }
    if let Some(l) = lambda.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::param("lambda", format!("multipliers must be nonnegative, got {l}")));
    }
    let mut grad = program.objective_gradient(z);
    let mut infeas_sq = 0.0;
    let mut comp_sq = 0.0;
    for (term, &l) in program.inequalities.iter().zip(lambda) {
        let g = term.value(z);
        infeas_sq += g.max(0.0).powi(2);
        comp_sq += (l * g).powi(2);
        if l != 0.0 {
            for (i, d) in term.gradient(z) {
                grad[i] += l * d;
            }
        }
    }
    for (row, &m) in program.eq_rows.iter().zip(mu) {
        for &(i, a) in row {
            grad[i] += a * m;
        }
    }
    infeas_sq += program.eq_residual(z).iter().map(|r| r * r).sum::<f64>();
    let stat = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((stat, infeas_sq.sqrt(), comp_sq.sqrt()))
}

/// Wraps `scale · g(v[..d]) − v[d]` for the phase-one slack formulation.
#[derive(Debug)]
struct SlackShifted {
    inner: Arc<dyn SmoothOracle>,
    scale: f64,
}

impl SmoothOracle for SlackShifted {
    fn dim(&self) -> usize {
        self.inner.dim() + 1
    }

    fn curvature(&self) -> Curvature {
        self.inner.curvature()
    }

    fn label(&self) -> String {
        format!("{} - s", self.inner.label())
    }

    fn value(&self, v: &[f64]) -> f64 {
        let d = self.inner.dim();
        self.scale * self.inner.value(&v[..d]) - v[d]
    }

    fn gradient(&self, v: &[f64], out: &mut [f64]) {
        let d = self.inner.dim();
        self.inner.gradient(&v[..d], &mut out[..d]);
        for o in &mut out[..d] {
            *o *= self.scale;
        }
        out[d] = -1.0;
    }

    fn hessian(&self, v: &[f64], out: &mut [f64]) {
        let d = self.inner.dim();
        let n = d + 1;
        let mut inner = vec![0.0; d * d];
        self.inner.hessian(&v[..d], &mut inner);
        out.fill(0.0);
        for i in 0..d {
            for j in 0..d {
                out[i * n + j] = self.scale * inner[i * d + j];
            }
        }
    }

    fn in_domain(&self, v: &[f64]) -> bool {
        self.inner.in_domain(&v[..self.inner.dim()])
    }
}

/// Finds a strictly feasible point by minimizing a common slack `s` subject
/// to `g_i(z) ≤ s`, `s ≥ −1`, `Az = b`.
///
/// Starts from `program.start` (or zeros), which must lie in every
/// inequality oracle's domain.
pub fn phase_one(program: &ConvexProgram, config: &SolverConfig) -> Result<Vec<f64>> {
    program.check()?;
    config.check()?;
    let n = program.n;
    let guess = program.start.clone().unwrap_or_else(|| vec![0.0; n]);
    if let Some(t) = program.inequalities.iter().find(|t| !t.in_domain(&guess)) {
        return Err(Error::Domain { oracle: t.label() });
    }
    if program.m() == 0 {
        // Only equalities: a least-norm Newton step from the guess suffices.
        let mut aux = program.clone();
        aux.objective.clear();
        let zeros_obj = crate::oracle::QuadraticOracle::squared_distance(&guess, "anchor");
        aux.objective.push(Term::new(
            Arc::new(zeros_obj),
            (0..n).map(Slot::Var).collect(),
            1.0,
            0,
        ));
        let sol = ipm::primal_dual(&aux, guess, config, config.tol_kkt, ipm::StopRule::Kkt);
        return if sol.r_feas <= config.tol_kkt.max(1e-9) {
            Ok(sol.z)
        } else {
            Err(Error::Infeasible { slack: sol.r_feas })
        };
    }

    let mut aux = ConvexProgram::new(n + 1);
    aux.var_stage[..n].copy_from_slice(&program.var_stage);
    aux.var_stage[n] = usize::MAX;
    aux.eq_rows = program.eq_rows.clone();
    aux.eq_rhs = program.eq_rhs.clone();
    aux.eq_stage = program.eq_stage.clone();
    aux.add_objective(Term::new(
        Arc::new(AffineOracle::new(vec![1.0], 0.0, "slack")),
        vec![Slot::Var(n)],
        1.0,
        usize::MAX,
    ));
    for t in &program.inequalities {
        let mut slots = t.slots.clone();
        slots.push(Slot::Var(n));
        aux.add_inequality(Term::new(
            Arc::new(SlackShifted {
                inner: t.oracle.clone(),
                scale: t.scale,
            }),
            slots,
            1.0,
            t.stage,
        ));
    }
    aux.add_inequality(Term::new(
        Arc::new(AffineOracle::new(vec![-1.0], -1.0, "slack floor")),
        vec![Slot::Var(n)],
        1.0,
        usize::MAX,
    ));

    let worst = program
        .inequalities
        .iter()
        .map(|t| t.value(&guess))
        .fold(f64::NEG_INFINITY, f64::max);
    if !worst.is_finite() {
        return Err(Error::NonFinite {
            oracle: "phase-one start".into(),
        });
    }
    let mut z0 = guess;
    z0.push(worst.max(-0.5) + 1.0);

    let loose = SolverConfig {
        tol_kkt: config.tol_kkt.max(1e-7),
        record_trace: false,
        ..config.clone()
    };
    let sol = ipm::primal_dual(&aux, z0, &loose, loose.tol_kkt, ipm::StopRule::NegativeSlack { index: n });
    let slack = sol.z[n];
    let mut z = sol.z;
    z.truncate(n);
    let eq_ok = program
        .eq_residual(&z)
        .iter()
        .all(|r| r.abs() <= 1e-7 * (1.0 + r.abs()));
    if slack < 0.0 && eq_ok && program.is_strictly_feasible(&z) {
        Ok(z)
    } else {
        Err(Error::Infeasible { slack })
    }
}

/// Solves the program from its start (if strictly feasible) or a phase-one
/// point. Non-optimal outcomes are reported through `status`.
pub fn solve(program: &ConvexProgram, config: &SolverConfig) -> Result<KktSolution> {
    program.check()?;
    config.check()?;
    let z0 = match &program.start {
        Some(s) if program.is_strictly_feasible(s) => s.clone(),
        _ => phase_one(program, config)?,
    };
    if let Some(t) = program.objective.iter().find(|t| !t.in_domain(&z0)) {
        return Err(Error::Domain { oracle: t.label() });
    }
    Ok(ipm::primal_dual(program, z0, config, config.tol_kkt, ipm::StopRule::Kkt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{AlphaFairUtility, QuadraticOracle};

    fn box_1d(lo: f64, hi: f64) -> Vec<Term> {
        vec![
            Term::new(Arc::new(AffineOracle::new(vec![1.0], -hi, "upper")), vec![Slot::Var(0)], 1.0, 0),
            Term::new(Arc::new(AffineOracle::new(vec![-1.0], lo, "lower")), vec![Slot::Var(0)], 1.0, 0),
        ]
    }

    #[test]
    fn phase_one_finds_interior_of_open_box() {
        let mut p = ConvexProgram::new(1);
        for t in box_1d(-1.0, 1.0) {
            p.add_inequality(t);
        }
        let z = phase_one(&p, &SolverConfig::default()).unwrap();
        assert!(z[0] > -1.0 && z[0] < 1.0);
    }

    #[test]
    fn phase_one_reports_empty_set() {
        let mut p = ConvexProgram::new(1);
        p.add_inequality(Term::new(Arc::new(AffineOracle::new(vec![1.0], 0.0, "z<=0")), vec![Slot::Var(0)], 1.0, 0));
        p.add_inequality(Term::new(Arc::new(AffineOracle::new(vec![-1.0], 1.0, "z>=1")), vec![Slot::Var(0)], 1.0, 0));
        match phase_one(&p, &SolverConfig::default()) {
            Err(Error::Infeasible { slack }) => assert!(slack > 0.4, "slack {slack}"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn projected_quadratic_on_halfline() {
        // minimize (z-3)^2 s.t. z <= 1
        let mut p = ConvexProgram::new(1);
        p.add_objective(Term::new(
            Arc::new(QuadraticOracle::new(vec![2.0], vec![-6.0], 9.0, Curvature::Convex, "f")),
            vec![Slot::Var(0)],
            1.0,
            0,
        ));
        p.add_inequality(Term::new(Arc::new(AffineOracle::new(vec![1.0], -1.0, "z<=1")), vec![Slot::Var(0)], 1.0, 0));
        let sol = solve(&p, &SolverConfig::default()).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.z[0] - 1.0).abs() < 1e-8);
        assert!((sol.lambda[0] - 4.0).abs() < 1e-6);
        assert!((sol.value - 4.0).abs() < 1e-7);
    }

    #[test]
    fn equality_constrained_least_norm() {
        let mut p = ConvexProgram::new(2);
        p.add_objective(Term::new(
            Arc::new(QuadraticOracle::new(vec![2.0, 0.0, 0.0, 2.0], vec![0.0, 0.0], 0.0, Curvature::Convex, "f")),
            vec![Slot::Var(0), Slot::Var(1)],
            1.0,
            0,
        ));
        p.add_equality(vec![(0, 1.0), (1, 1.0)], 1.0, 0);
        let sol = solve(&p, &SolverConfig::default()).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.z[0] - 0.5).abs() < 1e-9 && (sol.z[1] - 0.5).abs() < 1e-9);
        assert!((sol.value - 0.5).abs() < 1e-9);
    }

    #[test]
    fn concave_maximization_hits_upper_bound() {
        // maximize 2 sqrt(1 + u), 0 <= u <= 2
        let mut p = ConvexProgram::new(1);
        p.add_objective(Term::new(
            Arc::new(AlphaFairUtility {
                dim: 2,
                alpha: 0.5,
                groups: vec![vec![0, 1]],
                label: "reward".into(),
            }),
            vec![Slot::Fixed(1.0), Slot::Var(0)],
            -1.0,
            0,
        ));
        for t in box_1d(0.0, 2.0) {
            p.add_inequality(t);
        }
        let sol = solve(&p, &SolverConfig::default()).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.z[0] - 2.0).abs() < 1e-7);
        assert!((-sol.value - 2.0 * 3f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn kkt_residual_rejects_negative_multiplier() {
        let mut p = ConvexProgram::new(1);
        for t in box_1d(0.0, 1.0) {
            p.add_inequality(t);
        }
        assert!(kkt_residual(&p, &[0.5], &[-1.0, 0.0], &[]).is_err());
    }

    #[test]
    fn kkt_residual_interior_is_gradient_norm() {
        let mut p = ConvexProgram::new(2);
        p.add_objective(Term::new(
            Arc::new(AffineOracle::new(vec![3.0, 4.0], 0.0, "lin")),
            vec![Slot::Var(0), Slot::Var(1)],
            1.0,
            0,
        ));
        let (stat, feas, comp) = kkt_residual(&p, &[0.1, 0.2], &[], &[]).unwrap();
        assert!((stat - 5.0).abs() < 1e-15);
        assert_eq!(feas, 0.0);
        assert_eq!(comp, 0.0);
    }
}
