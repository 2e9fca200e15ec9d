//! Stage-wise control policies built on the relaxations: re-solving update,
//! projection of a fixed plan, the threshold hybrid of the two, and a
//! random-direction myopic baseline.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{AffineOracle, QuadraticOracle, SmoothOracle};
use crate::problem::{feasible_set, ProblemInstance};
use crate::relaxation::{solve_rel_minus, solve_rel_plus, RelaxedPlan};
use crate::simulator::unit_direction;
use crate::solver::{solve, ConvexProgram, KktSolution, Slot, SolverConfig, Term};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Update,
    Projection,
    /// `theta = f64::INFINITY` never re-solves after the initial plan.
    Hybrid { theta: f64 },
    Myopic { seed_offset: u64 },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Update => "update",
            PolicyKind::Projection => "projection",
            PolicyKind::Hybrid { .. } => "hybrid",
            PolicyKind::Myopic { .. } => "myopic",
        }
    }

    pub fn theta(&self) -> Option<f64> {
        match self {
            PolicyKind::Hybrid { theta } => Some(*theta),
            _ => None,
        }
    }

    /// Whether the policy starts from the `V_rel−` plan.
    pub fn needs_plan(&self) -> bool {
        !matches!(self, PolicyKind::Myopic { .. })
    }

    pub fn check(&self) -> Result<()> {
        match self {
            PolicyKind::Hybrid { theta } if !(*theta >= 0.0) => {
                Err(Error::param("theta", format!("must be nonnegative, got {theta}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Hybrid { theta } => write!(f, "hybrid(theta={theta})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PolicyState {
    pub cached_plan: Option<Arc<RelaxedPlan>>,
    pub resolve_count: usize,
    pub last_theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub t: usize,
    pub u: Vec<f64>,
    pub theta: Option<f64>,
    pub resolved: bool,
}

/// Initial state for `policy`. Plan-based policies reuse `initial` when
/// given (it must be the `V_rel−` plan from stage 1) and count it as one
/// solve either way.
pub fn prepare(
    policy: PolicyKind,
    instance: &ProblemInstance,
    config: &SolverConfig,
    initial: Option<Arc<RelaxedPlan>>,
) -> Result<PolicyState> {
    policy.check()?;
    if !policy.needs_plan() {
        return Ok(PolicyState::default());
    }
    let plan = match initial {
        Some(p) if p.t_start == 1 && p.u_star.len() == instance.horizon() => p,
        Some(_) => return Err(Error::param("initial plan", "must cover stages 1..=T")),
        None => Arc::new(solve_rel_minus(instance, 1, &instance.x1, config)?),
    };
    Ok(PolicyState {
        cached_plan: Some(plan),
        resolve_count: 1,
        last_theta: None,
    })
}

pub fn projection_prepare(instance: &ProblemInstance, config: &SolverConfig) -> Result<PolicyState> {
    prepare(PolicyKind::Projection, instance, config, None)
}

/// One stage of `policy`; `rng` is only drawn from by the myopic policy.
#[allow(clippy::too_many_arguments)]
pub fn act<R: Rng + ?Sized>(
    policy: PolicyKind,
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    rng: &mut R,
    config: &SolverConfig,
    state: &mut PolicyState,
) -> Result<ActionRecord> {
    match policy {
        PolicyKind::Update => update_act(instance, t, x, w, config, state),
        PolicyKind::Projection => projection_act(instance, t, x, w, config, state),
        PolicyKind::Hybrid { theta } => hybrid_act(instance, t, x, w, theta, config, state),
        PolicyKind::Myopic { .. } => myopic_act(instance, t, x, w, rng, config),
    }
}

fn resolve(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    config: &SolverConfig,
    state: &mut PolicyState,
) -> Result<Vec<f64>> {
    let warm = state
        .cached_plan
        .as_ref()
        .filter(|p| p.covers(t))
        .map(|p| p.u_star[t - p.t_start..].to_vec());
    let plan = solve_rel_plus(instance, t, x, w, warm.as_deref(), config)?;
    let u = plan.u_at(t).to_vec();
    state.cached_plan = Some(Arc::new(plan));
    state.resolve_count += 1;
    Ok(u)
}

pub fn update_act(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    config: &SolverConfig,
    state: &mut PolicyState,
) -> Result<ActionRecord> {
    let u = resolve(instance, t, x, w, config, state)?;
    Ok(ActionRecord {
        t,
        u,
        theta: None,
        resolved: true,
    })
}

fn cached(state: &PolicyState, t: usize) -> Result<Arc<RelaxedPlan>> {
    state
        .cached_plan
        .clone()
        .filter(|p| p.covers(t))
        .ok_or_else(|| Error::param("policy state", format!("no cached plan covers stage {t}")).at_stage(t))
}

pub fn projection_act(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    config: &SolverConfig,
    state: &mut PolicyState,
) -> Result<ActionRecord> {
    let plan = cached(state, t)?;
    let u = project_onto_stage(instance, t, x, w, plan.u_at(t), config)?;
    Ok(ActionRecord {
        t,
        u,
        theta: None,
        resolved: false,
    })
}

pub fn hybrid_act(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    theta_max: f64,
    config: &SolverConfig,
    state: &mut PolicyState,
) -> Result<ActionRecord> {
    if !(theta_max >= 0.0) {
        return Err(Error::param("theta", "must be nonnegative"));
    }
    let plan = cached(state, t)?;
    let u_pi = project_onto_stage(instance, t, x, w, plan.u_at(t), config)?;
    let planned = instance.concat(plan.x_at(t), instance.wbar(), plan.u_at(t));
    let realized = instance.concat(x, w, &u_pi);
    let theta = planned
        .iter()
        .zip(&realized)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    state.last_theta = Some(theta);
    if theta < theta_max {
        return Ok(ActionRecord {
            t,
            u: u_pi,
            theta: Some(theta),
            resolved: false,
        });
    }
    let u = resolve(instance, t, x, w, config, state)?;
    Ok(ActionRecord {
        t,
        u,
        theta: Some(theta),
        resolved: true,
    })
}

pub fn myopic_act<R: Rng + ?Sized>(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    rng: &mut R,
    config: &SolverConfig,
) -> Result<ActionRecord> {
    let c = unit_direction(rng, instance.dims.n_u);
    let u = maximize_linear(instance, t, x, w, &c, config)?;
    Ok(ActionRecord {
        t,
        u,
        theta: None,
        resolved: false,
    })
}

fn stage_program(instance: &ProblemInstance, t: usize, x: &[f64], w: &[f64], objective: Arc<dyn SmoothOracle>) -> Result<ConvexProgram> {
    let mut program = feasible_set(instance, t, x, w)?.to_program()?;
    program.add_objective(Term::new(objective, (0..instance.dims.n_u).map(Slot::Var).collect(), 1.0, 0));
    Ok(program)
}

/// The projection program `min ½‖u − target‖²` over the stage-`t` feasible
/// set at `(x, w)`.
pub fn build_projection(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    target: &[f64],
) -> Result<ConvexProgram> {
    if target.len() != instance.dims.n_u {
        return Err(Error::dim("target", instance.dims.n_u, target.len()));
    }
    stage_program(instance, t, x, w, Arc::new(QuadraticOracle::squared_distance(target, "projection")))
}

pub fn solve_projection(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    target: &[f64],
    config: &SolverConfig,
) -> Result<(ConvexProgram, KktSolution)> {
    let program = build_projection(instance, t, x, w, target)?;
    let kkt = solve(&program, config).and_then(KktSolution::into_optimal).map_err(|e| e.at_stage(t))?;
    Ok((program, kkt))
}

/// Euclidean projection of `target` onto the stage feasible set. A target
/// that is already feasible is returned unchanged.
pub fn project_onto_stage(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    target: &[f64],
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    let bundle = feasible_set(instance, t, x, w)?;
    let member = bundle.in_domain(target)
        && bundle.inequality_values(target).iter().all(|g| *g <= 0.0)
        && bundle.equality_values(target).iter().all(|h| *h == 0.0)
        && instance.stage(t).reward.in_domain(&instance.concat(x, w, target));
    if member {
        return Ok(target.to_vec());
    }
    Ok(solve_projection(instance, t, x, w, target, config)?.1.z)
}

/// `argmax c·u` over the stage feasible set.
pub fn maximize_linear(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    c: &[f64],
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    if c.len() != instance.dims.n_u {
        return Err(Error::dim("direction", instance.dims.n_u, c.len()));
    }
    let objective = AffineOracle::new(c.iter().map(|v| -v).collect(), 0.0, "linear");
    let program = stage_program(instance, t, x, w, Arc::new(objective))?;
    let kkt = solve(&program, config).and_then(KktSolution::into_optimal).map_err(|e| e.at_stage(t))?;
    Ok(kkt.z)
}

/// `Σ max(g_i, 0) + Σ |h_j|` at the stage input `(x, w, u)`.
pub fn residual_deviation(instance: &ProblemInstance, t: usize, x: &[f64], w: &[f64], u: &[f64]) -> Result<f64> {
    instance.check_stage_vectors(t, x, w, Some(u))?;
    let v = instance.concat(x, w, u);
    let stage = instance.stage(t);
    let mut r = 0.0;
    for g in &stage.inequalities {
        r += if g.in_domain(&v) { g.value(&v).max(0.0) } else { f64::INFINITY };
    }
    for h in &stage.equalities {
        r += h.value(&v).abs();
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netutil::{build_instance, build_single_path, reference_params, SinglePathParams};
    use crate::problem::{AffineDynamics, AffineMap, Dims, EndogenousNoise, ExogenousNoise, StageSpec};
    use crate::simulator::{run_episode, DrawPurpose, RngStream};

    const N: usize = 7;

    /// One dummy state, `w ∈ R³`, `0 ≤ u ≤ w`, reward `Σ u`.
    fn box_instance(horizon: usize) -> ProblemInstance {
        let mut ineq: Vec<Arc<dyn SmoothOracle>> = Vec::new();
        for i in 0..3 {
            ineq.push(Arc::new(AffineOracle::coordinate(N, 4 + i, -1.0, 0.0, format!("u{i} >= 0"))));
            let mut c = vec![0.0; N];
            c[4 + i] = 1.0;
            c[1 + i] = -1.0;
            ineq.push(Arc::new(AffineOracle::new(c, 0.0, format!("u{i} <= w{i}"))));
        }
        let mut reward = vec![0.0; N];
        reward[4..].fill(1.0);
        let stage = StageSpec {
            reward: Arc::new(AffineOracle::new(reward, 0.0, "sum u")),
            inequalities: ineq,
            equalities: Vec::new(),
        };
        let mut c = vec![vec![0.0]; N];
        c[0][0] = 1.0;
        ProblemInstance {
            name: "box".into(),
            dims: Dims { n_x: 1, n_u: 3, n_w: 3, horizon },
            x1: vec![1.0],
            stages: vec![stage; horizon],
            dynamics: AffineDynamics::stationary(AffineMap { c, d: vec![0.0] }),
            exo: ExogenousNoise {
                mean: vec![2.0; 3],
                half_width: vec![1.0; 3],
                sigma: 0.0,
            },
            endo: EndogenousNoise::None,
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn projection_of_member_is_identity() {
        let inst = box_instance(1);
        let target = [0.5, 1.0, 1.5];
        let u = project_onto_stage(&inst, 1, &[1.0], &[2.0; 3], &target, &SolverConfig::default()).unwrap();
        assert_eq!(u, target);
    }

    #[test]
    fn projection_onto_box_is_a_clamp() {
        let inst = box_instance(1);
        let cfg = SolverConfig::default();
        for (target, w) in [
            ([3.0, 1.0, 2.5], [2.0, 2.0, 2.0]),
            ([-1.0, 1.0, 3.0], [2.0, 1.5, 2.5]),
            ([4.0, 4.0, 4.0], [1.0, 2.0, 3.0]),
        ] {
            let clamp: Vec<f64> = target.iter().zip(&w).map(|(t, w): (&f64, &f64)| t.clamp(0.0, *w)).collect();
            let u = project_onto_stage(&inst, 1, &[1.0], &w, &target, &cfg).unwrap();
            assert!(close(&u, &clamp, 1e-6), "{u:?} vs {clamp:?}");
        }
    }

    #[test]
    fn linear_maximizer_on_box_is_a_corner() {
        let inst = box_instance(1);
        let c = vec![1.0 / 3f64.sqrt(); 3];
        let u = maximize_linear(&inst, 1, &[1.0], &[2.0; 3], &c, &SolverConfig::default()).unwrap();
        assert!(close(&u, &[2.0; 3], 1e-6), "{u:?}");
    }

    #[test]
    fn linear_maximizer_on_singleton() {
        let mut inst = box_instance(1);
        let mut eqs: Vec<Arc<dyn SmoothOracle>> = Vec::new();
        for i in 0..3 {
            let mut c = vec![0.0; N];
            c[4 + i] = 1.0;
            c[1 + i] = -1.0;
            eqs.push(Arc::new(AffineOracle::new(c, 0.0, format!("u{i} = w{i}"))));
        }
        inst.stages[0].inequalities.clear();
        inst.stages[0].equalities = eqs;
        let cfg = SolverConfig::default();
        let w = [1.5, 0.5, 2.0];
        let mut rng = RngStream::new(5).substream(0, 1, DrawPurpose::Policy(0));
        for _ in 0..3 {
            let rec = myopic_act(&inst, 1, &[1.0], &w, &mut rng, &cfg).unwrap();
            assert!(close(&rec.u, &w, 1e-8), "{:?}", rec.u);
        }
    }

    #[test]
    fn myopic_is_deterministic_per_seed() {
        let inst = build_instance(&reference_params(3, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let draw = |seed| {
            let mut rng = RngStream::new(seed).substream(0, 1, DrawPurpose::Policy(0));
            myopic_act(&inst, 1, &inst.x1, inst.wbar(), &mut rng, &cfg).unwrap().u
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn residual_examples() {
        let inst = box_instance(1);
        let w = [2.0; 3];
        assert_eq!(residual_deviation(&inst, 1, &[1.0], &w, &[1.0, 2.0, 0.0]).unwrap(), 0.0);
        let r = residual_deviation(&inst, 1, &[1.0], &w, &[2.25, 1.0, 1.0]).unwrap();
        assert!((r - 0.25).abs() < 1e-15);

        let net = build_instance(&reference_params(2, 1.0)).unwrap();
        let w = net.wbar().to_vec();
        let u: Vec<f64> = w.iter().enumerate().map(|(i, v)| v + if i == 0 { 1.0 } else { 0.0 }).collect();
        assert!(residual_deviation(&net, 1, &net.x1, &w, &u).unwrap() >= 1.0);
    }

    #[test]
    fn one_stage_update_fills_the_observed_demand() {
        let inst = build_single_path(&SinglePathParams::default()).unwrap();
        let cfg = SolverConfig::default();
        let mut state = prepare(PolicyKind::Update, &inst, &cfg, None).unwrap();
        let rec = update_act(&inst, 1, &inst.x1, &[1.0], &cfg, &mut state).unwrap();
        assert!((rec.u[0] - 1.0).abs() < 1e-6, "{:?}", rec.u);
        assert!(rec.resolved);
        assert_eq!(state.resolve_count, 2);
    }

    #[test]
    fn deterministic_update_follows_the_plan() {
        let inst = build_instance(&reference_params(5, 0.0)).unwrap();
        let cfg = SolverConfig::default();
        let stream = RngStream::new(1);
        let plan = Arc::new(solve_rel_minus(&inst, 1, &inst.x1, &cfg).unwrap());
        let rec = run_episode(&inst, PolicyKind::Update, &cfg, &stream, 0, Some(plan.clone())).unwrap();
        for s in &rec.stages {
            assert!(close(&s.u, plan.u_at(s.t), 1e-6), "stage {}: {:?} vs {:?}", s.t, s.u, plan.u_at(s.t));
        }
        assert_eq!(rec.resolve_count, 6);
    }

    #[test]
    fn infinite_threshold_is_projection() {
        let inst = build_instance(&reference_params(6, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let stream = RngStream::new(4);
        for r in 0..3 {
            let h = run_episode(&inst, PolicyKind::Hybrid { theta: f64::INFINITY }, &cfg, &stream, r, None).unwrap();
            let p = run_episode(&inst, PolicyKind::Projection, &cfg, &stream, r, None).unwrap();
            assert_eq!(h.resolve_count, 1);
            assert_eq!(h.value, p.value);
            for (a, b) in h.stages.iter().zip(&p.stages) {
                assert_eq!(a.u, b.u);
            }
        }
    }

    #[test]
    fn zero_threshold_is_update() {
        let inst = build_instance(&reference_params(6, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let stream = RngStream::new(4);
        for r in 0..2 {
            let h = run_episode(&inst, PolicyKind::Hybrid { theta: 0.0 }, &cfg, &stream, r, None).unwrap();
            let u = run_episode(&inst, PolicyKind::Update, &cfg, &stream, r, None).unwrap();
            assert_eq!(h.resolve_count, 7);
            assert_eq!(h.value, u.value);
            for (a, b) in h.stages.iter().zip(&u.stages) {
                assert_eq!(a.u, b.u);
                assert_eq!(a.x, b.x);
            }
        }
    }

    #[test]
    fn threshold_tie_resolves() {
        let inst = build_instance(&reference_params(4, 1.0)).unwrap();
        let cfg = SolverConfig::default();
        let w = [2.5, 1.2, 2.9];
        let mut probe = prepare(PolicyKind::Hybrid { theta: f64::INFINITY }, &inst, &cfg, None).unwrap();
        let theta = hybrid_act(&inst, 1, &inst.x1, &w, f64::INFINITY, &cfg, &mut probe).unwrap().theta.unwrap();
        assert!(theta > 0.0);
        let mut state = prepare(PolicyKind::Hybrid { theta }, &inst, &cfg, None).unwrap();
        let rec = hybrid_act(&inst, 1, &inst.x1, &w, theta, &cfg, &mut state).unwrap();
        assert!(rec.resolved);
        assert_eq!(state.resolve_count, 2);
        let mut state = prepare(PolicyKind::Hybrid { theta }, &inst, &cfg, None).unwrap();
        let rec = hybrid_act(&inst, 1, &inst.x1, &w, theta * (1.0 + 1e-12), &cfg, &mut state).unwrap();
        assert!(!rec.resolved);
    }

    #[test]
    fn negative_threshold_rejected() {
        assert!(PolicyKind::Hybrid { theta: -1.0 }.check().is_err());
        assert!(PolicyKind::Hybrid { theta: f64::NAN }.check().is_err());
        let inst = build_instance(&reference_params(2, 1.0)).unwrap();
        assert!(prepare(PolicyKind::Hybrid { theta: -0.5 }, &inst, &SolverConfig::default(), None).is_err());
    }

    #[test]
    fn actions_are_feasible_for_every_policy() {
        let cfg = SolverConfig::default();
        let policies = [
            PolicyKind::Update,
            PolicyKind::Projection,
            PolicyKind::Hybrid { theta: 1.0 },
            PolicyKind::Myopic { seed_offset: 0 },
        ];
        for sigma in [0.0, 0.5, 1.0, 2.0] {
            let inst = build_instance(&reference_params(5, sigma)).unwrap();
            let stream = RngStream::new(11);
            for policy in policies {
                for r in 0..3 {
                    let rec = run_episode(&inst, policy, &cfg, &stream, r, None).unwrap();
                    for s in &rec.stages {
                        let g = feasible_set(&inst, s.t, &s.x, &s.w).unwrap().inequality_values(&s.u);
                        let worst = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        assert!(worst <= 1e-6, "{policy} σ={sigma} stage {}: max g = {worst}", s.t);
                    }
                    assert!(rec.resolve_count <= inst.horizon() + 1);
                }
            }
        }
    }
}
