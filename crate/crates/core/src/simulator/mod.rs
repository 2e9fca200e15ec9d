//! Seeded episode simulation and Monte Carlo evaluation.

mod rng;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policies::{act, prepare, PolicyKind};
use crate::problem::ProblemInstance;
use crate::relaxation::{solve_rel_minus, RelaxedPlan};
use crate::solver::SolverConfig;

pub use rng::{sample_truncated_normal, unit_direction, DrawPurpose, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub reward: f64,
    /// Endogenous draw added after the affine dynamics.
    pub eps: Vec<f64>,
    pub theta: Option<f64>,
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub replication: u64,
    pub stages: Vec<StageRecord>,
    pub x_final: Vec<f64>,
    pub value: f64,
    pub resolve_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub policy: PolicyKind,
    pub sigma: f64,
    pub m: usize,
    pub seed: u64,
    pub mean: f64,
    pub stderr: f64,
    pub v_rel_minus: f64,
    pub gap_bound: f64,
    pub mean_resolves: f64,
    pub max_resolves: usize,
    pub min_resolves: usize,
    pub values: Vec<f64>,
    pub resolves: Vec<usize>,
}

/// Simulates one episode on the substreams of `replication`.
///
/// `initial` is the `V_rel−` plan from stage 1; plan-based policies solve it
/// themselves when it is absent.
pub fn run_episode(
    instance: &ProblemInstance,
    policy: PolicyKind,
    config: &SolverConfig,
    stream: &RngStream,
    replication: u64,
    initial: Option<Arc<RelaxedPlan>>,
) -> Result<TrajectoryRecord> {
    let mut state = prepare(policy, instance, config, initial)?;
    let offset = match policy {
        PolicyKind::Myopic { seed_offset } => seed_offset,
        _ => 0,
    };
    let n_x = instance.dims.n_x;
    let mut x = instance.x1.clone();
    let mut stages = Vec::with_capacity(instance.horizon());
    let mut value = 0.0;
    for t in 1..=instance.horizon() {
        let stage_key = t as u64;
        let mut exo = stream.substream(replication, stage_key, DrawPurpose::Exogenous);
        let w = instance.exo.sample(&mut exo).map_err(|e| e.at_stage(t))?;
        let mut prng = stream.substream(replication, stage_key, DrawPurpose::Policy(offset));
        let action = act(policy, instance, t, &x, &w, &mut prng, config, &mut state).map_err(|e| e.at_stage(t))?;
        let v = instance.concat(&x, &w, &action.u);
        let reward_oracle = &instance.stage(t).reward;
        if !reward_oracle.in_domain(&v) {
            return Err(Error::Domain {
                oracle: reward_oracle.label(),
            }
            .at_stage(t));
        }
        let reward = reward_oracle.value(&v);
        value += reward;
        let mut endo = stream.substream(replication, stage_key, DrawPurpose::Endogenous);
        let eps = instance.endo.sample(n_x, &v, &mut endo).map_err(|e| e.at_stage(t))?;
        let mut next = instance.dynamics.at(t).apply(&v);
        for (a, e) in next.iter_mut().zip(&eps) {
            *a += e;
        }
        stages.push(StageRecord {
            t,
            x: std::mem::replace(&mut x, next),
            w,
            u: action.u,
            reward,
            eps,
            theta: action.theta,
            resolved: action.resolved,
        });
    }
    Ok(TrajectoryRecord {
        replication,
        stages,
        x_final: x,
        value,
        resolve_count: state.resolve_count,
    })
}

/// Mean and unbiased standard error; the error is 0 for a single sample.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    (mean, (var / m as f64).sqrt())
}

/// Runs `m` episodes on replications `0..m` of `seed`, in parallel, and
/// reduces them in replication order.
pub fn evaluate_with_plan(
    instance: &ProblemInstance,
    policy: PolicyKind,
    m: usize,
    config: &SolverConfig,
    seed: u64,
    plan: Arc<RelaxedPlan>,
) -> Result<EvaluationReport> {
    if m == 0 {
        return Err(Error::param("M", "at least one replication is required"));
    }
    let stream = RngStream::new(seed);
    let initial = policy.needs_plan().then(|| plan.clone());
    let outcomes: Vec<Result<(f64, usize)>> = (0..m as u64)
        .into_par_iter()
        .map(|r| {
            run_episode(instance, policy, config, &stream, r, initial.clone())
                .map(|rec| (rec.value, rec.resolve_count))
                .map_err(|e| e.at_replication(r as usize))
        })
        .collect();
    let mut values = Vec::with_capacity(m);
    let mut resolves = Vec::with_capacity(m);
    for o in outcomes {
        let (v, c) = o?;
        values.push(v);
        resolves.push(c);
    }
    let (mean, stderr) = mean_stderr(&values);
    Ok(EvaluationReport {
        policy,
        sigma: instance.sigma(),
        m,
        seed,
        mean,
        stderr,
        v_rel_minus: plan.value,
        gap_bound: plan.value - mean,
        mean_resolves: resolves.iter().sum::<usize>() as f64 / m as f64,
        max_resolves: resolves.iter().copied().max().unwrap_or(0),
        min_resolves: resolves.iter().copied().min().unwrap_or(0),
        values,
        resolves,
    })
}

pub fn evaluate(
    instance: &ProblemInstance,
    policy: PolicyKind,
    m: usize,
    config: &SolverConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    let plan = Arc::new(solve_rel_minus(instance, 1, &instance.x1, config)?);
    evaluate_with_plan(instance, policy, m, config, seed, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netutil::{build_instance, build_single_path, reference_params, SinglePathParams};

    #[test]
    fn deterministic_episode_reaches_the_relaxed_value() {
        let inst = build_instance(&reference_params(6, 0.0)).unwrap();
        let cfg = SolverConfig::default();
        for policy in [PolicyKind::Update, PolicyKind::Projection, PolicyKind::Hybrid { theta: 1.5 }] {
            let rep = evaluate(&inst, policy, 2, &cfg, 3).unwrap();
            assert!(rep.gap_bound.abs() <= 1e-4 * rep.v_rel_minus.abs(), "{policy}: gap {}", rep.gap_bound);
            assert_eq!(rep.stderr, 0.0);
        }
    }

    #[test]
    fn single_stage_value_is_the_stage_reward() {
        let inst = build_single_path(&SinglePathParams {
            sigma: 0.5,
            ..SinglePathParams::default()
        })
        .unwrap();
        let rec = run_episode(&inst, PolicyKind::Update, &SolverConfig::default(), &RngStream::new(2), 0, None).unwrap();
        assert_eq!(rec.stages.len(), 1);
        let s = &rec.stages[0];
        let v = inst.concat(&s.x, &s.w, &s.u);
        assert_eq!(rec.value, inst.stage(1).reward.value(&v));
    }

    #[test]
    fn episodes_are_reproducible() {
        let inst = build_instance(&reference_params(5, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let stream = RngStream::new(8);
        for policy in [PolicyKind::Hybrid { theta: 1.0 }, PolicyKind::Myopic { seed_offset: 3 }] {
            let a = run_episode(&inst, policy, &cfg, &stream, 2, None).unwrap();
            let b = run_episode(&inst, policy, &cfg, &stream, 2, None).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn trajectories_obey_the_dynamics_and_supports() {
        let inst = build_instance(&reference_params(6, 2.0)).unwrap();
        let (lo, hi) = inst.exo.support();
        let rec = run_episode(&inst, PolicyKind::Projection, &SolverConfig::default(), &RngStream::new(5), 1, None).unwrap();
        let mut next_x: Vec<Vec<f64>> = rec.stages.iter().skip(1).map(|s| s.x.clone()).collect();
        next_x.push(rec.x_final.clone());
        for (s, x1) in rec.stages.iter().zip(&next_x) {
            let v = inst.concat(&s.x, &s.w, &s.u);
            let phi = inst.dynamics.at(s.t).apply(&v);
            for k in 0..phi.len() {
                assert!((x1[k] - phi[k] - s.eps[k]).abs() <= 1e-12);
            }
            let bound = inst.endo.bound(inst.dims.n_x, &v);
            assert!(s.eps.iter().zip(&bound).all(|(e, b)| e.abs() <= *b));
            assert!(s.w.iter().zip(&lo).zip(&hi).all(|((w, l), h)| l <= w && w <= h));
            for g in &inst.stage(s.t).inequalities {
                assert!(g.in_domain(&v));
            }
        }
        let total: f64 = rec.stages.iter().map(|s| s.reward).sum();
        assert_eq!(rec.value, total);
    }

    #[test]
    fn single_replication_has_zero_stderr() {
        let inst = build_instance(&reference_params(4, 1.0)).unwrap();
        let rep = evaluate(&inst, PolicyKind::Projection, 1, &SolverConfig::default(), 1).unwrap();
        assert_eq!(rep.stderr, 0.0);
        assert_eq!(rep.mean, rep.values[0]);
        assert!(evaluate(&inst, PolicyKind::Projection, 0, &SolverConfig::default(), 1).is_err());
    }

    #[test]
    fn mean_stderr_oracle() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, divided by 4
        assert!((s - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let inst = build_instance(&reference_params(5, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| evaluate(&inst, PolicyKind::Hybrid { theta: 1.0 }, 12, &cfg, 6).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn disjoint_seeds_agree_statistically() {
        let inst = build_instance(&reference_params(30, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let plan = Arc::new(solve_rel_minus(&inst, 1, &inst.x1, &cfg).unwrap());
        let a = evaluate_with_plan(&inst, PolicyKind::Projection, 400, &cfg, 1, plan.clone()).unwrap();
        let b = evaluate_with_plan(&inst, PolicyKind::Projection, 400, &cfg, 2, plan).unwrap();
        let pooled = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() <= 4.0 * pooled, "{} vs {} (pooled {pooled})", a.mean, b.mean);
    }
}
