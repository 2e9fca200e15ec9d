//! Primal-dual interior-point iteration on the modified KKT conditions
//! `∇f + Σλ_i∇g_i + Aᵀν = 0`, `−λ_i g_i = 1/t`, `Az = b`, with
//! `t = barrier_mult · m / η` and `η = −gᵀλ` the surrogate duality gap.

use serde::{Deserialize, Serialize};

use super::banded::BandLu;
use super::{kkt_residual, ConvexProgram, KktSolution, SolveStatus, SolverConfig, Term};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterationTrace {
    pub iter: usize,
    pub barrier_weight: f64,
    pub residual_before: f64,
    pub residual_after: f64,
    pub step: f64,
}

struct TermCache {
    /// (local slot, program variable)
    vars: Vec<(usize, usize)>,
    dim: usize,
    affine: bool,
}

impl TermCache {
    fn new(term: &Term) -> Self {
        Self {
            vars: term.var_slots(),
            dim: term.slots.len(),
            affine: term.oracle.curvature() == crate::oracle::Curvature::Affine,
        }
    }
}

struct Workspace {
    buf: Vec<f64>,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

/// First-order data at a point.
struct Eval {
    grad_f: Vec<f64>,
    g: Vec<f64>,
    /// Sparse gradient of every inequality: (variable, value).
    dg: Vec<Vec<(usize, f64)>>,
}

struct Layout {
    obj: Vec<TermCache>,
    ineq: Vec<TermCache>,
    /// KKT position of variable `i` (`pos[i]`) and equality row `r`
    /// (`pos[n + r]`).
    pos: Vec<usize>,
    bandwidth: usize,
}

impl Layout {
    fn new(program: &ConvexProgram) -> Self {
        let n = program.n;
        let p = program.p();
        let mut order: Vec<(usize, u8, usize)> = (0..n)
            .map(|i| (program.var_stage[i], 0u8, i))
            .chain((0..p).map(|r| (program.eq_stage[r], 1u8, n + r)))
            .collect();
        order.sort();
        let mut pos = vec![0; n + p];
        for (k, &(_, _, idx)) in order.iter().enumerate() {
            pos[idx] = k;
        }
        let obj: Vec<TermCache> = program.objective.iter().map(TermCache::new).collect();
        let ineq: Vec<TermCache> = program.inequalities.iter().map(TermCache::new).collect();
        let mut bandwidth = 0;
        for tc in obj.iter().chain(&ineq) {
            for &(_, a) in &tc.vars {
                for &(_, b) in &tc.vars {
                    bandwidth = bandwidth.max(pos[a].abs_diff(pos[b]));
                }
            }
        }
        for (r, row) in program.eq_rows.iter().enumerate() {
            for &(i, _) in row {
                bandwidth = bandwidth.max(pos[n + r].abs_diff(pos[i]));
            }
        }
        Self {
            obj,
            ineq,
            pos,
            bandwidth,
        }
    }
}

fn gather(term: &Term, z: &[f64], buf: &mut Vec<f64>) {
    term.gather(z, buf);
}

impl Eval {
    fn empty() -> Self {
        Self {
            grad_f: Vec::new(),
            g: Vec::new(),
            dg: Vec::new(),
        }
    }
}

/// Values and gradients into `out`; false if the point leaves a domain.
fn evaluate(program: &ConvexProgram, layout: &Layout, z: &[f64], ws: &mut Workspace, out: &mut Eval) -> bool {
    out.grad_f.clear();
    out.grad_f.resize(program.n, 0.0);
    for (term, tc) in program.objective.iter().zip(&layout.obj) {
        gather(term, z, &mut ws.buf);
        if !term.oracle.in_domain(&ws.buf) {
            return false;
        }
        ws.grad.resize(tc.dim, 0.0);
        term.oracle.gradient(&ws.buf, &mut ws.grad);
        for &(k, i) in &tc.vars {
            out.grad_f[i] += term.scale * ws.grad[k];
        }
    }
    let m = program.m();
    out.g.clear();
    out.dg.resize_with(m, Vec::new);
    for ((term, tc), dg) in program.inequalities.iter().zip(&layout.ineq).zip(out.dg.iter_mut()) {
        gather(term, z, &mut ws.buf);
        if !term.oracle.in_domain(&ws.buf) {
            return false;
        }
        let v = term.scale * term.oracle.value(&ws.buf);
        if !v.is_finite() {
            return false;
        }
        ws.grad.resize(tc.dim, 0.0);
        term.oracle.gradient(&ws.buf, &mut ws.grad);
        out.g.push(v);
        dg.clear();
        dg.extend(tc.vars.iter().map(|&(k, i)| (i, term.scale * ws.grad[k])));
    }
    out.grad_f.iter().all(|v| v.is_finite())
}

fn eq_residual(program: &ConvexProgram, z: &[f64]) -> Vec<f64> {
    program.eq_residual(z)
}

fn dual_residual(program: &ConvexProgram, ev: &Eval, lam: &[f64], nu: &[f64]) -> Vec<f64> {
    let mut r = ev.grad_f.clone();
    for (dg, &l) in ev.dg.iter().zip(lam) {
        for &(i, d) in dg {
            r[i] += l * d;
        }
    }
    for (row, &v) in program.eq_rows.iter().zip(nu) {
        for &(i, a) in row {
            r[i] += a * v;
        }
    }
    r
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn residual_norm(program: &ConvexProgram, ev: &Eval, lam: &[f64], nu: &[f64], z: &[f64], t: f64) -> f64 {
    let rd = norm_sq(&dual_residual(program, ev, lam, nu));
    let rc: f64 = ev
        .g
        .iter()
        .zip(lam)
        .map(|(g, l)| (-l * g - 1.0 / t).powi(2))
        .sum();
    let rp = norm_sq(&eq_residual(program, z));
    (rd + rc + rp).sqrt()
}

/// When to stop iterating.
#[derive(Debug, Clone, Copy)]
pub(super) enum StopRule {
    /// All KKT residuals below the tolerance.
    Kkt,
    /// Phase one: variable `index` is negative and within 10% of optimal
    /// (surrogate gap), with the equalities satisfied.
    NegativeSlack { index: usize },
}

pub(super) fn primal_dual(
    program: &ConvexProgram,
    z0: Vec<f64>,
    config: &SolverConfig,
    tol: f64,
    stop: StopRule,
) -> KktSolution {
    let n = program.n;
    let m = program.m();
    let p = program.p();
    let layout = Layout::new(program);
    let mut ws = Workspace {
        buf: Vec::new(),
        grad: Vec::new(),
        hess: Vec::new(),
    };
    let mut kkt = BandLu::new(n + p, layout.bandwidth, layout.bandwidth);
    let mut rhs = vec![0.0; n + p];
    let mut trace = Vec::new();

    let mut z = z0;
    let mut nu = vec![0.0; p];
    let mut ev = Eval::empty();
    let mut trial = Eval::empty();
    if !evaluate(program, &layout, &z, &mut ws, &mut ev) || ev.g.iter().any(|&g| g >= 0.0) {
        return finish(program, z, vec![1.0; m], nu, 0, SolveStatus::DomainEscape, tol, trace);
    }
    let mut lam: Vec<f64> = ev.g.iter().map(|g| 1.0 / (config.t0 * -g)).collect();

    let mut iters = 0;
    let mut last_step = 1.0;
    let mut status = SolveStatus::MaxIter;
    while iters < config.max_newton {
        let eta: f64 = -ev.g.iter().zip(&lam).map(|(g, l)| g * l).sum::<f64>();
        // After a short step, recentre at the current gap instead of
        // tightening the barrier.
        let mult = if last_step < 0.1 { 1.0 } else { config.barrier_mult };
        let t = if m > 0 { mult * m as f64 / eta } else { 1.0 };
        let r_dual = dual_residual(program, &ev, &lam, &nu);
        let r_pri = eq_residual(program, &z);
        let rd = norm_sq(&r_dual).sqrt();
        let rp = norm_sq(&r_pri).sqrt();
        if rd <= tol && rp <= tol && (m == 0 || eta <= tol) {
            status = SolveStatus::Optimal;
            break;
        }
        if let StopRule::NegativeSlack { index } = stop {
            if z[index] < 0.0 && rp <= tol && eta <= 0.1 * -z[index] {
                status = SolveStatus::Optimal;
                break;
            }
        }
        iters += 1;
        let r_cent: Vec<f64> = ev.g.iter().zip(&lam).map(|(g, l)| -l * g - 1.0 / t).collect();

        // H_pd = ∇²f + Σλ∇²g + Σ(λ/−g)∇g∇gᵀ, stored in KKT order.
        kkt.clear();
        let pos = &layout.pos;
        for (term, tc) in program.objective.iter().zip(&layout.obj) {
            add_term_hessian(term, tc, &z, term.scale, pos, &mut kkt, &mut ws);
        }
        for ((term, tc), &l) in program.inequalities.iter().zip(&layout.ineq).zip(&lam) {
            add_term_hessian(term, tc, &z, l * term.scale, pos, &mut kkt, &mut ws);
        }
        for ((dg, &l), &g) in ev.dg.iter().zip(&lam).zip(&ev.g) {
            let w = l / -g;
            for &(a, da) in dg {
                for &(b, db) in dg {
                    kkt.add(pos[a], pos[b], w * da * db);
                }
            }
        }
        for (r, row) in program.eq_rows.iter().enumerate() {
            for &(i, a) in row {
                kkt.add(pos[n + r], pos[i], a);
                kkt.add(pos[i], pos[n + r], a);
            }
        }
        let mut rhs_z = r_dual.clone();
        for ((dg, &rc), &g) in ev.dg.iter().zip(&r_cent).zip(&ev.g) {
            for &(i, d) in dg {
                rhs_z[i] += d * rc / g;
            }
        }
        for i in 0..n {
            rhs[pos[i]] = -rhs_z[i];
        }
        for r in 0..p {
            rhs[pos[n + r]] = -r_pri[r];
        }

        let base = kkt.clone();
        let mut reg = 0.0;
        let mut solved = false;
        for _ in 0..8 {
            let mut attempt = base.clone();
            if reg > 0.0 {
                for i in 0..n {
                    attempt.add(pos[i], pos[i], reg);
                }
                for r in 0..p {
                    attempt.add(pos[n + r], pos[n + r], -reg);
                }
            }
            if attempt.factor() {
                let mut sol = rhs.clone();
                attempt.solve(&mut sol);
                if sol.iter().all(|v| v.is_finite()) {
                    rhs.copy_from_slice(&sol);
                    solved = true;
                    break;
                }
            }
            reg = if reg == 0.0 { 1e-10 } else { reg * 100.0 };
        }
        if !solved {
            break;
        }
        debug_assert_eq!(kkt.dim(), n + p);
        let dz: Vec<f64> = (0..n).map(|i| rhs[pos[i]]).collect();
        let dnu: Vec<f64> = (0..p).map(|r| rhs[pos[n + r]]).collect();
        let dlam: Vec<f64> = ev
            .dg
            .iter()
            .zip(&lam)
            .zip(&r_cent)
            .zip(&ev.g)
            .map(|(((dg, &l), &rc), &g)| {
                let dgdz: f64 = dg.iter().map(|&(i, d)| d * dz[i]).sum();
                (rc - l * dgdz) / g
            })
            .collect();

        let mut s_max: f64 = 1.0;
        for (&l, &d) in lam.iter().zip(&dlam) {
            if d < 0.0 {
                s_max = s_max.min(-l / d);
            }
        }
        let mut s = (config.ftb * s_max).min(1.0);
        let r_norm = residual_norm(program, &ev, &lam, &nu, &z, t);

        let mut accepted: Option<Vec<f64>> = None;
        let mut domain_failures = 0;
        while s > 1e-14 {
            let zt: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + s * b).collect();
            match evaluate(program, &layout, &zt, &mut ws, &mut trial) {
                true if trial.g.iter().all(|&g| g < 0.0) => {
                    let lt: Vec<f64> = lam.iter().zip(&dlam).map(|(a, b)| a + s * b).collect();
                    let nt: Vec<f64> = nu.iter().zip(&dnu).map(|(a, b)| a + s * b).collect();
                    let rt = residual_norm(program, &trial, &lt, &nt, &zt, t);
                    if rt <= (1.0 - config.ls_alpha * s) * r_norm {
                        if config.record_trace {
                            trace.push(IterationTrace {
                                iter: iters,
                                barrier_weight: t,
                                residual_before: r_norm,
                                residual_after: rt,
                                step: s,
                            });
                        }
                        accepted = Some(zt);
                        break;
                    }
                }
                _ => domain_failures += 1,
            }
            s *= config.ls_beta;
        }
        match accepted {
            Some(zt) => {
                last_step = s;
                z = zt;
                std::mem::swap(&mut ev, &mut trial);
                for (l, d) in lam.iter_mut().zip(&dlam) {
                    *l += s * d;
                }
                for (v, d) in nu.iter_mut().zip(&dnu) {
                    *v += s * d;
                }
            }
            None => {
                if domain_failures > 0 && s <= 1e-14 && domain_failures >= 40 {
                    status = SolveStatus::DomainEscape;
                }
                break;
            }
        }
    }
    if status != SolveStatus::Optimal && status != SolveStatus::DomainEscape {
        status = SolveStatus::MaxIter;
    }
    finish(program, z, lam, nu, iters, status, tol, trace)
}

fn add_term_hessian(
    term: &Term,
    tc: &TermCache,
    z: &[f64],
    weight: f64,
    pos: &[usize],
    kkt: &mut BandLu,
    ws: &mut Workspace,
) {
    if weight == 0.0 || tc.affine || tc.vars.is_empty() {
        return;
    }
    term.gather(z, &mut ws.buf);
    let d = tc.dim;
    ws.hess.resize(d * d, 0.0);
    term.oracle.hessian(&ws.buf, &mut ws.hess);
    for &(ka, a) in &tc.vars {
        for &(kb, b) in &tc.vars {
            let h = ws.hess[ka * d + kb];
            if h != 0.0 {
                kkt.add(pos[a], pos[b], weight * h);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    program: &ConvexProgram,
    z: Vec<f64>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    iters: usize,
    status: SolveStatus,
    tol: f64,
    trace: Vec<IterationTrace>,
) -> KktSolution {
    let (r_stat, r_feas, r_comp) =
        kkt_residual(program, &z, &lambda, &mu).unwrap_or((f64::INFINITY, f64::INFINITY, f64::INFINITY));
    let status = if status == SolveStatus::Optimal && !(r_stat <= tol && r_feas <= tol && r_comp <= tol) {
        SolveStatus::MaxIter
    } else {
        status
    };
    KktSolution {
        value: program.objective_value(&z),
        z,
        lambda,
        mu,
        r_stat,
        r_feas,
        r_comp,
        iters,
        status,
        trace,
    }
}
