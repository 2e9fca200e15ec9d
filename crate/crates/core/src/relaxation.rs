//! Certainty-equivalent relaxations stacked over a horizon slice.
//!
//! Variables are ordered stage by stage: `x(s)` for `s > t_start`, then
//! `u(s)`. The state at `t_start` is data, and `x(T+1)` is omitted since it
//! enters neither a reward nor a constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{step_dynamics, strictly_feasible_control, ProblemInstance};
use crate::solver::{solve, ConvexProgram, KktSolution, Slot, SolverConfig, Term};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxedPlan {
    pub t_start: usize,
    /// `u*(s)` for `s = t_start..=T`.
    pub u_star: Vec<Vec<f64>>,
    /// `x*(s)` for `s = t_start..=T`; the first entry is the frozen state.
    pub x_star: Vec<Vec<f64>>,
    /// Optimal total reward (maximization sign).
    pub value: f64,
    pub kkt: KktSolution,
}

impl RelaxedPlan {
    pub fn horizon_end(&self) -> usize {
        self.t_start + self.u_star.len() - 1
    }

    pub fn covers(&self, t: usize) -> bool {
        t >= self.t_start && t <= self.horizon_end()
    }

    /// Planned control at stage `t`.
    pub fn u_at(&self, t: usize) -> &[f64] {
        &self.u_star[t - self.t_start]
    }

    /// Planned state at stage `t`.
    pub fn x_at(&self, t: usize) -> &[f64] {
        &self.x_star[t - self.t_start]
    }
}

/// Where the stacked variables of each stage live.
#[derive(Debug, Clone)]
pub struct StackLayout {
    pub t_start: usize,
    pub n_x: usize,
    pub n_u: usize,
    /// First index of `x(s)` (None at `t_start`) and of `u(s)`.
    pub x_base: Vec<Option<usize>>,
    pub u_base: Vec<usize>,
    pub n: usize,
}

impl StackLayout {
    fn new(instance: &ProblemInstance, t_start: usize) -> Self {
        let (n_x, n_u) = (instance.dims.n_x, instance.dims.n_u);
        let mut x_base = Vec::new();
        let mut u_base = Vec::new();
        let mut n = 0;
        for s in t_start..=instance.horizon() {
            if s > t_start {
                x_base.push(Some(n));
                n += n_x;
            } else {
                x_base.push(None);
            }
            u_base.push(n);
            n += n_u;
        }
        Self {
            t_start,
            n_x,
            n_u,
            x_base,
            u_base,
            n,
        }
    }

    pub fn stages(&self) -> usize {
        self.u_base.len()
    }

    pub fn u(&self, s: usize, z: &[f64]) -> Vec<f64> {
        let b = self.u_base[s - self.t_start];
        z[b..b + self.n_u].to_vec()
    }

    pub fn x(&self, s: usize, z: &[f64], x_start: &[f64]) -> Vec<f64> {
        match self.x_base[s - self.t_start] {
            Some(b) => z[b..b + self.n_x].to_vec(),
            None => x_start.to_vec(),
        }
    }

    /// Writes a stage-wise trajectory into a stacked vector.
    pub fn pack(&self, xs: &[Vec<f64>], us: &[Vec<f64>]) -> Vec<f64> {
        let mut z = vec![0.0; self.n];
        for k in 0..self.stages() {
            if let Some(b) = self.x_base[k] {
                z[b..b + self.n_x].copy_from_slice(&xs[k]);
            }
            let b = self.u_base[k];
            z[b..b + self.n_u].copy_from_slice(&us[k]);
        }
        z
    }
}

fn assemble(
    instance: &ProblemInstance,
    t_start: usize,
    x_start: &[f64],
    w_first: &[f64],
) -> Result<(ConvexProgram, StackLayout)> {
    instance.check_stage_vectors(t_start, x_start, w_first, None)?;
    let dims = instance.dims;
    let layout = StackLayout::new(instance, t_start);
    let mut program = ConvexProgram::new(layout.n);
    let wbar = instance.wbar();
    for (k, s) in (t_start..=instance.horizon()).enumerate() {
        let w = if s == t_start { w_first } else { wbar };
        let mut slots = Vec::with_capacity(dims.stage_input());
        match layout.x_base[k] {
            Some(b) => slots.extend((0..dims.n_x).map(|j| Slot::Var(b + j))),
            None => slots.extend(x_start.iter().map(|&c| Slot::Fixed(c))),
        }
        slots.extend(w.iter().map(|&c| Slot::Fixed(c)));
        slots.extend((0..dims.n_u).map(|j| Slot::Var(layout.u_base[k] + j)));
        if let Some(b) = layout.x_base[k] {
            program.var_stage[b..b + dims.n_x].fill(s);
        }
        program.var_stage[layout.u_base[k]..layout.u_base[k] + dims.n_u].fill(s);

        let stage = instance.stage(s);
        program.add_objective(Term::new(stage.reward.clone(), slots.clone(), -1.0, s));
        for o in &stage.inequalities {
            program.add_inequality(Term::new(o.clone(), slots.clone(), 1.0, s));
        }
        for o in &stage.equalities {
            program.add_affine_equality(&Term::new(o.clone(), slots.clone(), 1.0, s))?;
        }

        // x(s+1) − φ_s(x(s), w, u(s)) = 0
        if s < instance.horizon() {
            let map = instance.dynamics.at(s);
            let next = layout.x_base[k + 1].expect("later stages carry state variables");
            for j in 0..dims.n_x {
                let mut row = vec![(next + j, 1.0)];
                let mut rhs = map.d[j];
                for (i, slot) in slots.iter().enumerate() {
                    let c = map.c[i][j];
                    if c == 0.0 {
                        continue;
                    }
                    match *slot {
                        Slot::Var(v) => row.push((v, -c)),
                        Slot::Fixed(val) => rhs += c * val,
                    }
                }
                program.add_equality(row, rhs, s);
            }
        }
    }
    Ok((program, layout))
}

/// `V_rel−` from `(t_start, x_start)`: every stage at the mean noise.
pub fn build_rel_minus(instance: &ProblemInstance, t_start: usize, x_start: &[f64]) -> Result<ConvexProgram> {
    Ok(assemble(instance, t_start, x_start, instance.wbar())?.0)
}

/// `V̂_rel+` at stage `t`: the observed `w` at stage `t`, the mean afterwards.
pub fn build_rel_plus(instance: &ProblemInstance, t: usize, x: &[f64], w: &[f64]) -> Result<ConvexProgram> {
    Ok(assemble(instance, t, x, w)?.0)
}

/// Strictly feasible starting trajectory along the nominal dynamics: the
/// phase-one control at each stage, or a guess blended toward it.
const WARM_PULL: f64 = 0.1;

fn rollout_start(
    instance: &ProblemInstance,
    layout: &StackLayout,
    x_start: &[f64],
    w_first: &[f64],
    guess: Option<&[Vec<f64>]>,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    let mut xs = Vec::with_capacity(layout.stages());
    let mut us = Vec::with_capacity(layout.stages());
    let mut x = x_start.to_vec();
    for (k, s) in (layout.t_start..=instance.horizon()).enumerate() {
        let w = if k == 0 { w_first } else { instance.wbar() };
        let center = strictly_feasible_control(instance, s, &x, w, config)?;
        // A feasible guess pulled toward the phase-one point is strictly
        // feasible by convexity.
        let feasible_guess = guess.and_then(|g| g.get(k)).filter(|u| {
            let v = instance.concat(&x, w, u);
            let stage = instance.stage(s);
            stage.reward.in_domain(&v)
                && stage.inequalities.iter().all(|g| g.in_domain(&v) && g.value(&v) <= 0.0)
        });
        let u = match feasible_guess {
            Some(g) => g
                .iter()
                .zip(&center)
                .map(|(a, b)| (1.0 - WARM_PULL) * a + WARM_PULL * b)
                .collect(),
            None => center,
        };
        let next = step_dynamics::<rand_chacha::ChaCha8Rng>(instance, s, &x, w, &u, None)?;
        xs.push(std::mem::replace(&mut x, next));
        us.push(u);
    }
    Ok(layout.pack(&xs, &us))
}

fn solve_stacked(
    instance: &ProblemInstance,
    t_start: usize,
    x_start: &[f64],
    w_first: &[f64],
    warm: Option<&[Vec<f64>]>,
    config: &SolverConfig,
) -> Result<RelaxedPlan> {
    let (mut program, layout) = assemble(instance, t_start, x_start, w_first)?;
    program.start = Some(rollout_start(instance, &layout, x_start, w_first, warm, config)?);
    let mut kkt = solve(&program, config)?;
    if !kkt.is_optimal() && warm.is_some() {
        program.start = Some(rollout_start(instance, &layout, x_start, w_first, None, config)?);
        kkt = solve(&program, config)?;
    }
    let kkt = kkt.into_optimal()?;
    let u_star = (t_start..=instance.horizon()).map(|s| layout.u(s, &kkt.z)).collect();
    let x_star = (t_start..=instance.horizon()).map(|s| layout.x(s, &kkt.z, x_start)).collect();
    Ok(RelaxedPlan {
        t_start,
        u_star,
        x_star,
        value: -kkt.value,
        kkt,
    })
}

pub fn solve_rel_minus(
    instance: &ProblemInstance,
    t_start: usize,
    x_start: &[f64],
    config: &SolverConfig,
) -> Result<RelaxedPlan> {
    solve_stacked(instance, t_start, x_start, instance.wbar(), None, config).map_err(|e| e.at_stage(t_start))
}

/// `V̂_rel+`; `warm` optionally supplies candidate controls for stages
/// `t..=T`, used where strictly feasible.
pub fn solve_rel_plus(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    warm: Option<&[Vec<f64>]>,
    config: &SolverConfig,
) -> Result<RelaxedPlan> {
    solve_stacked(instance, t, x, w, warm, config).map_err(|e| e.at_stage(t))
}

/// Largest violation of the plan's stage constraints and dynamics.
pub fn plan_violation(instance: &ProblemInstance, plan: &RelaxedPlan, w_first: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in plan.t_start..=plan.horizon_end() {
        let w = if s == plan.t_start { w_first } else { instance.wbar() };
        let (x, u) = (plan.x_at(s), plan.u_at(s));
        let v = instance.concat(x, w, u);
        let stage = instance.stage(s);
        for g in &stage.inequalities {
            worst = worst.max(g.value(&v));
        }
        for h in &stage.equalities {
            worst = worst.max(h.value(&v).abs());
        }
        if s < plan.horizon_end() {
            let next = step_dynamics::<rand_chacha::ChaCha8Rng>(instance, s, x, w, u, None)?;
            for (a, b) in next.iter().zip(plan.x_at(s + 1)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    if !worst.is_finite() {
        return Err(Error::NonFinite {
            oracle: "plan constraints".into(),
        });
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netutil::{build_instance, build_single_path, reference_params, SinglePathParams};
    use crate::oracle::AffineOracle;
    use std::sync::Arc;

    /// Best feasible stage reward over a uniform grid of `u`.
    fn grid_oracle(instance: &ProblemInstance, x: &[f64], w: &[f64], hi: f64, step: f64) -> (f64, f64) {
        let stage = instance.stage(1);
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        let mut k = 0;
        loop {
            let u = (k as f64 * step).min(hi);
            let v = instance.concat(x, w, &[u]);
            let ok = stage.inequalities.iter().all(|g| g.in_domain(&v) && g.value(&v) <= 0.0);
            if ok {
                let r = stage.reward.value(&v);
                if r > best.0 {
                    best = (r, u);
                }
            }
            if u >= hi {
                break;
            }
            k += 1;
        }
        best
    }

    #[test]
    fn single_path_relaxation_hits_the_box() {
        let inst = build_single_path(&SinglePathParams::default()).unwrap();
        let plan = solve_rel_minus(&inst, 1, &[1.0], &SolverConfig::default()).unwrap();
        let (best, arg) = grid_oracle(&inst, &[1.0], &[2.0], 3.0, 1e-4);
        assert!((plan.u_at(1)[0] - arg).abs() < 1e-6);
        assert!((plan.value - best).abs() < 1e-6);
        assert!((plan.value - 2.0 * 3f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn single_path_plus_uses_observed_noise() {
        let inst = build_single_path(&SinglePathParams::default()).unwrap();
        let plan = solve_rel_plus(&inst, 1, &[1.0], &[1.0], None, &SolverConfig::default()).unwrap();
        let (best, arg) = grid_oracle(&inst, &[1.0], &[1.0], 3.0, 1e-4);
        assert!((plan.u_at(1)[0] - arg).abs() < 1e-6);
        assert!((plan.value - best).abs() < 1e-6);
        assert!((plan.value - 2.0 * 2f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn zero_reward_has_zero_value() {
        let mut inst = build_single_path(&SinglePathParams {
            horizon: 4,
            ..Default::default()
        })
        .unwrap();
        for s in &mut inst.stages {
            s.reward = Arc::new(AffineOracle::new(vec![0.0; 3], 0.0, "zero"));
        }
        let plan = solve_rel_minus(&inst, 1, &[1.0], &SolverConfig::default()).unwrap();
        assert!(plan.value.abs() < 1e-12);
    }

    #[test]
    fn plus_at_mean_noise_is_the_minus_program() {
        let inst = build_instance(&reference_params(6, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let x = [0.8, 1.3, 0.9];
        for t in [1, 3, 6] {
            let a = solve_rel_minus(&inst, t, &x, &cfg).unwrap();
            let b = solve_rel_plus(&inst, t, &x, inst.wbar(), None, &cfg).unwrap();
            assert!((a.value - b.value).abs() < 1e-6);
            assert_eq!(a.kkt.z, b.kkt.z);
        }
    }

    #[test]
    fn last_stage_plus_is_one_stage_program() {
        let inst = build_instance(&reference_params(4, 1.0)).unwrap();
        let p = build_rel_plus(&inst, 4, &[1.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.n, 3);
        assert_eq!(p.m(), 14);
        assert_eq!(p.p(), 0);
    }

    #[test]
    fn plans_do_not_depend_on_sigma() {
        let cfg = SolverConfig::default();
        let a = solve_rel_minus(&build_instance(&reference_params(5, 0.0)).unwrap(), 1, &[1.0; 3], &cfg).unwrap();
        let b = solve_rel_minus(&build_instance(&reference_params(5, 2.0)).unwrap(), 1, &[1.0; 3], &cfg).unwrap();
        assert_eq!(a.u_star, b.u_star);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn tail_resolves_agree_with_the_plan() {
        let inst = build_instance(&reference_params(8, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let plan = solve_rel_minus(&inst, 1, &inst.x1, &cfg).unwrap();
        assert!(plan_violation(&inst, &plan, inst.wbar()).unwrap() < 1e-8);
        for t in [2, 5, 8] {
            let tail: f64 = (t..=8)
                .map(|s| {
                    let v = inst.concat(plan.x_at(s), inst.wbar(), plan.u_at(s));
                    inst.stage(s).reward.value(&v)
                })
                .sum();
            let again = solve_rel_minus(&inst, t, plan.x_at(t), &cfg).unwrap();
            assert!((again.value - tail).abs() < 1e-6, "t={t}: {} vs {tail}", again.value);
        }
    }

    #[test]
    fn warm_start_keeps_the_value() {
        let inst = build_instance(&reference_params(10, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let plan = solve_rel_minus(&inst, 1, &inst.x1, &cfg).unwrap();
        let x = [0.9, 1.2, 0.7];
        let w = [2.4, 1.1, 2.9];
        let cold = solve_rel_plus(&inst, 3, &x, &w, None, &cfg).unwrap();
        let warm = solve_rel_plus(&inst, 3, &x, &w, Some(&plan.u_star[2..]), &cfg).unwrap();
        assert!((cold.value - warm.value).abs() < 1e-7);
    }

    /// Coarse-to-fine grid over the three controls of the first stage.
    fn refined_grid(instance: &ProblemInstance) -> f64 {
        let stage = instance.stage(1);
        let x = &instance.x1;
        let w = instance.wbar();
        let value = |u: &[f64; 3]| {
            let v = instance.concat(x, w, u);
            if stage.inequalities.iter().all(|g| g.in_domain(&v) && g.value(&v) <= 0.0) {
                stage.reward.value(&v)
            } else {
                f64::NEG_INFINITY
            }
        };
        let mut center = [1.0; 3];
        let mut half = 1.0;
        let mut best = f64::NEG_INFINITY;
        for _ in 0..12 {
            let n = 20;
            let step = 2.0 * half / n as f64;
            let base = center;
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let u = [
                            (base[0] - half + i as f64 * step).clamp(0.0, 2.0),
                            (base[1] - half + j as f64 * step).clamp(0.0, 2.0),
                            (base[2] - half + k as f64 * step).clamp(0.0, 2.0),
                        ];
                        let r = value(&u);
                        if r > best {
                            best = r;
                            center = u;
                        }
                    }
                }
            }
            half *= 0.3;
        }
        best
    }

    #[test]
    fn table1_fixture_value() {
        let cfg = SolverConfig::default();
        let one = build_instance(&reference_params(1, 1.0)).unwrap();
        let short = solve_rel_minus(&one, 1, &one.x1, &cfg).unwrap();
        let grid = refined_grid(&one);
        assert!(grid <= short.value + 1e-9);
        assert!(short.value - grid < 1e-6, "{} vs {grid}", short.value);

        let inst = build_instance(&reference_params(30, 1.0)).unwrap();
        let plan = solve_rel_minus(&inst, 1, &inst.x1, &cfg).unwrap();
        assert!((plan.value - V0_T30).abs() < 1e-6, "{}", plan.value);
    }

    /// `V_rel−` of the reference diamond network over 30 stages.
    const V0_T30: f64 = 323.523636295530;
}
