//! Finite-horizon convex stochastic control problems: data model, dynamics,
//! per-stage feasible sets and sampling-based validation of the modelling
//! assumptions.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{finite_difference_gradient, finite_difference_hessian, Curvature, SmoothOracle};
use crate::simulator::{sample_truncated_normal, DrawPurpose, RngStream};
use crate::solver::{phase_one, ConvexProgram, Slot, SolverConfig, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub horizon: usize,
}

impl Dims {
    /// Length of the concatenated stage input `(x, w, u)`.
    pub fn stage_input(&self) -> usize {
        self.n_x + self.n_w + self.n_u
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("n_x", self.n_x), ("n_u", self.n_u), ("n_w", self.n_w), ("horizon", self.horizon)] {
            if v == 0 {
                return Err(Error::param(name, "must be strictly positive"));
            }
        }
        Ok(())
    }
}

/// `φ(x, w, u) = (x, w, u)·C + D` with `C` of shape `(n_x+n_w+n_u) × n_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub c: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.d.clone();
        for (vi, row) in v.iter().zip(&self.c) {
            if *vi != 0.0 {
                for (o, c) in out.iter_mut().zip(row) {
                    *o += vi * c;
                }
            }
        }
        out
    }
}

/// One map for every stage, or one per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineDynamics {
    pub maps: Vec<AffineMap>,
}

impl AffineDynamics {
    pub fn stationary(map: AffineMap) -> Self {
        Self { maps: vec![map] }
    }

    /// Map used at stage `t` (1-based).
    pub fn at(&self, t: usize) -> &AffineMap {
        if self.maps.len() == 1 {
            &self.maps[0]
        } else {
            &self.maps[t - 1]
        }
    }

    fn check(&self, dims: &Dims) -> Result<()> {
        if self.maps.len() != 1 && self.maps.len() != dims.horizon {
            return Err(Error::dim("dynamics.maps", dims.horizon, self.maps.len()));
        }
        for map in &self.maps {
            if map.c.len() != dims.stage_input() {
                return Err(Error::dim("dynamics.c rows", dims.stage_input(), map.c.len()));
            }
            if let Some(row) = map.c.iter().find(|r| r.len() != dims.n_x) {
                return Err(Error::dim("dynamics.c columns", dims.n_x, row.len()));
            }
            if map.d.len() != dims.n_x {
                return Err(Error::dim("dynamics.d", dims.n_x, map.d.len()));
            }
        }
        Ok(())
    }
}

/// Reward, inequality and equality oracles of one stage, all over `(x, w, u)`.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub reward: Arc<dyn SmoothOracle>,
    pub inequalities: Vec<Arc<dyn SmoothOracle>>,
    pub equalities: Vec<Arc<dyn SmoothOracle>>,
}

/// `W = mean + TN(0, σ², −half_width, half_width)` componentwise, i.i.d.
/// across stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousNoise {
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
    pub sigma: f64,
}

impl ExogenousNoise {
    pub fn support(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.mean.iter().zip(&self.half_width).map(|(m, h)| m - h).collect();
        let hi = self.mean.iter().zip(&self.half_width).map(|(m, h)| m + h).collect();
        (lo, hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        self.mean
            .iter()
            .zip(&self.half_width)
            .map(|(m, h)| Ok(m + sample_truncated_normal(rng, self.sigma, -h, *h)?))
            .collect()
    }
}

/// Zero-mean state noise added after the affine dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndogenousNoise {
    None,
    /// Component `k` is `TN(0, σ², −b_k, b_k)` with
    /// `b_k = max(0, coeffs[k] · (x, w, u))`.
    ProportionalTruncatedNormal { coeffs: Vec<Vec<f64>>, sigma: f64 },
}

impl EndogenousNoise {
    pub fn sigma(&self) -> f64 {
        match self {
            EndogenousNoise::None => 0.0,
            EndogenousNoise::ProportionalTruncatedNormal { sigma, .. } => *sigma,
        }
    }

    /// Half-widths of the support at the stage input `v = (x, w, u)`.
    pub fn bound(&self, n_x: usize, v: &[f64]) -> Vec<f64> {
        match self {
            EndogenousNoise::None => vec![0.0; n_x],
            EndogenousNoise::ProportionalTruncatedNormal { coeffs, .. } => coeffs
                .iter()
                .map(|row| crate::oracle::dot(row, v).max(0.0))
                .collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_x: usize, v: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let sigma = self.sigma();
        self.bound(n_x, v)
            .into_iter()
            .map(|b| sample_truncated_normal(rng, sigma, -b, b))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub dims: Dims,
    pub x1: Vec<f64>,
    pub stages: Vec<StageSpec>,
    pub dynamics: AffineDynamics,
    pub exo: ExogenousNoise,
    pub endo: EndogenousNoise,
}

impl ProblemInstance {
    /// Stage `t`, 1-based.
    pub fn stage(&self, t: usize) -> &StageSpec {
        &self.stages[t - 1]
    }

    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    pub fn wbar(&self) -> &[f64] {
        &self.exo.mean
    }

    pub fn sigma(&self) -> f64 {
        self.exo.sigma
    }

    /// Same instance with both noise scales set to `sigma`.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut out = self.clone();
        out.exo.sigma = sigma;
        if let EndogenousNoise::ProportionalTruncatedNormal { sigma: s, .. } = &mut out.endo {
            *s = sigma;
        }
        out
    }

    pub fn concat(&self, x: &[f64], w: &[f64], u: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dims.stage_input());
        v.extend_from_slice(x);
        v.extend_from_slice(w);
        v.extend_from_slice(u);
        v
    }

    pub fn check_stage_vectors(&self, t: usize, x: &[f64], w: &[f64], u: Option<&[f64]>) -> Result<()> {
        if t == 0 || t > self.dims.horizon {
            return Err(Error::param("t", format!("stage {t} outside [1, {}]", self.dims.horizon)));
        }
        if x.len() != self.dims.n_x {
            return Err(Error::dim("x", self.dims.n_x, x.len()));
        }
        if w.len() != self.dims.n_w {
            return Err(Error::dim("w", self.dims.n_w, w.len()));
        }
        if let Some(u) = u {
            if u.len() != self.dims.n_u {
                return Err(Error::dim("u", self.dims.n_u, u.len()));
            }
        }
        Ok(())
    }

    /// Structural checks: shapes, stage count and oracle input widths.
    pub fn check(&self) -> Result<()> {
        let d = &self.dims;
        d.check()?;
        if self.x1.len() != d.n_x {
            return Err(Error::dim("x1", d.n_x, self.x1.len()));
        }
        if self.stages.len() != d.horizon {
            return Err(Error::dim("stages", d.horizon, self.stages.len()));
        }
        self.dynamics.check(d)?;
        if self.exo.mean.len() != d.n_w {
            return Err(Error::dim("exo.mean", d.n_w, self.exo.mean.len()));
        }
        if self.exo.half_width.len() != d.n_w {
            return Err(Error::dim("exo.half_width", d.n_w, self.exo.half_width.len()));
        }
        if self.exo.half_width.iter().any(|h| !(*h >= 0.0)) {
            return Err(Error::param("exo.half_width", "must be nonnegative"));
        }
        if !(self.exo.sigma >= 0.0) {
            return Err(Error::param("exo.sigma", "must be nonnegative"));
        }
        if let EndogenousNoise::ProportionalTruncatedNormal { coeffs, sigma } = &self.endo {
            if coeffs.len() != d.n_x {
                return Err(Error::dim("endo.coeffs", d.n_x, coeffs.len()));
            }
            if let Some(r) = coeffs.iter().find(|r| r.len() != d.stage_input()) {
                return Err(Error::dim("endo.coeffs columns", d.stage_input(), r.len()));
            }
            if !(*sigma >= 0.0) {
                return Err(Error::param("endo.sigma", "must be nonnegative"));
            }
        }
        for (k, stage) in self.stages.iter().enumerate() {
            let all = std::iter::once(&stage.reward)
                .chain(&stage.inequalities)
                .chain(&stage.equalities);
            for o in all {
                if o.dim() != d.stage_input() {
                    return Err(Error::dim(
                        format!("stage {} oracle `{}` input", k + 1, o.label()),
                        d.stage_input(),
                        o.dim(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `φ(x, w, u)` plus, when an RNG is supplied, one endogenous draw.
pub fn step_dynamics<R: Rng + ?Sized>(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    u: &[f64],
    rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    instance.check_stage_vectors(t, x, w, Some(u))?;
    let v = instance.concat(x, w, u);
    let mut next = instance.dynamics.at(t).apply(&v);
    if let Some(rng) = rng {
        let eps = instance.endo.sample(instance.dims.n_x, &v, rng)?;
        for (n, e) in next.iter_mut().zip(eps) {
            *n += e;
        }
    }
    Ok(next)
}

/// Stage constraints with `(x, w)` frozen, as terms over the control `u`.
#[derive(Debug, Clone)]
pub struct ConstraintBundle {
    pub t: usize,
    pub n_u: usize,
    pub inequalities: Vec<Term>,
    pub equalities: Vec<Term>,
}

impl ConstraintBundle {
    pub fn inequality_values(&self, u: &[f64]) -> Vec<f64> {
        self.inequalities.iter().map(|t| t.value(u)).collect()
    }

    pub fn equality_values(&self, u: &[f64]) -> Vec<f64> {
        self.equalities.iter().map(|t| t.value(u)).collect()
    }

    pub fn in_domain(&self, u: &[f64]) -> bool {
        self.inequalities.iter().chain(&self.equalities).all(|t| t.in_domain(u))
    }

    /// A program over `u` with these constraints and no objective.
    pub fn to_program(&self) -> Result<ConvexProgram> {
        let mut p = ConvexProgram::new(self.n_u);
        for t in &self.inequalities {
            p.add_inequality(t.clone());
        }
        for t in &self.equalities {
            p.add_affine_equality(t)?;
        }
        Ok(p)
    }
}

fn stage_slots(dims: &Dims, x: &[f64], w: &[f64], u_base: usize) -> Vec<Slot> {
    x.iter()
        .chain(w)
        .map(|&c| Slot::Fixed(c))
        .chain((0..dims.n_u).map(|k| Slot::Var(u_base + k)))
        .collect()
}

pub fn feasible_set(instance: &ProblemInstance, t: usize, x: &[f64], w: &[f64]) -> Result<ConstraintBundle> {
    instance.check_stage_vectors(t, x, w, None)?;
    let slots = stage_slots(&instance.dims, x, w, 0);
    let stage = instance.stage(t);
    let wrap = |o: &Arc<dyn SmoothOracle>| Term::new(o.clone(), slots.clone(), 1.0, 0);
    Ok(ConstraintBundle {
        t,
        n_u: instance.dims.n_u,
        inequalities: stage.inequalities.iter().map(wrap).collect(),
        equalities: stage.equalities.iter().map(wrap).collect(),
    })
}

/// A strictly feasible control for stage `t` at `(x, w)` by phase one from
/// `u = 0`.
pub fn strictly_feasible_control(
    instance: &ProblemInstance,
    t: usize,
    x: &[f64],
    w: &[f64],
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    let bundle = feasible_set(instance, t, x, w)?;
    let program = bundle.to_program()?;
    let u = phase_one(&program, config).map_err(|e| e.at_stage(t))?;
    let v = instance.concat(x, w, &u);
    if !instance.stage(t).reward.in_domain(&v) {
        return Err(Error::Domain {
            oracle: instance.stage(t).reward.label(),
        }
        .at_stage(t));
    }
    Ok(u)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleCheck {
    pub stage: usize,
    pub role: String,
    pub label: String,
    pub points: usize,
    pub gradient_rel_err: f64,
    pub hessian_rel_err: f64,
    pub hessian_symmetric: bool,
    pub curvature_ok: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseCheck {
    pub draws: usize,
    pub within_support: bool,
    pub mean_norm: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlaterCheck {
    pub stage: usize,
    pub strictly_feasible: bool,
    /// `−max_i g_i` at the phase-one control; positive when strictly feasible.
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub oracles: Vec<OracleCheck>,
    pub exogenous: NoiseCheck,
    pub endogenous: NoiseCheck,
    pub slater: Vec<SlaterCheck>,
    pub passed: bool,
}

const GRAD_TOL: f64 = 1e-5;
const HESS_TOL: f64 = 1e-4;
const VALIDATION_POINTS: usize = 20;
const NOISE_DRAWS: usize = 10_000;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1.0);
    num / den
}

fn expected_tags(role: &str) -> &'static [Curvature] {
    match role {
        "reward" => &[Curvature::Concave, Curvature::Affine],
        "inequality" => &[Curvature::Convex, Curvature::Affine],
        _ => &[Curvature::Affine],
    }
}

/// Tag consistency with the oracle's role, plus a zero-Hessian check for
/// affine tags at `v`.
fn check_tag(oracle: &dyn SmoothOracle, role: &str, v: &[f64]) -> Result<()> {
    let tag = oracle.curvature();
    let expected = expected_tags(role);
    if !expected.contains(&tag) {
        return Err(Error::CurvatureTag {
            oracle: oracle.label(),
            tag: tag.to_string(),
            detail: format!("a {role} oracle must be one of {expected:?}"),
        });
    }
    if tag == Curvature::Affine && oracle.in_domain(v) {
        let n = oracle.dim();
        let mut hess = vec![0.0; n * n];
        oracle.hessian(v, &mut hess);
        let scale = hess.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale > 0.0 {
            return Err(Error::CurvatureTag {
                oracle: oracle.label(),
                tag: tag.to_string(),
                detail: format!("its Hessian has an entry of magnitude {scale:.3e}"),
            });
        }
    }
    Ok(())
}

fn check_oracle<R: Rng + ?Sized>(
    oracle: &dyn SmoothOracle,
    role: &str,
    stage: usize,
    center: &[f64],
    rng: &mut R,
) -> Result<OracleCheck> {
    let tag = oracle.curvature();
    check_tag(oracle, role, center)?;
    let n = oracle.dim();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    let (mut g_err, mut h_err) = (0.0f64, 0.0f64);
    let (mut symmetric, mut curvature_ok) = (true, true);
    let mut points = 0;
    let mut attempts = 0;
    while points < VALIDATION_POINTS && attempts < 50 * VALIDATION_POINTS {
        attempts += 1;
        let v: Vec<f64> = if points == 0 && attempts == 1 {
            center.to_vec()
        } else {
            center
                .iter()
                .map(|c| c + 1e-2 * (1.0 + c.abs()) * rng.gen_range(-1.0..1.0))
                .collect()
        };
        if !oracle.in_domain(&v) {
            continue;
        }
        points += 1;
        let value = oracle.value(&v);
        oracle.gradient(&v, &mut grad);
        oracle.hessian(&v, &mut hess);
        if !value.is_finite() || grad.iter().chain(&hess).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { oracle: oracle.label() });
        }
        g_err = g_err.max(rel_err(&grad, &finite_difference_gradient(oracle, &v, 1e-6)));
        h_err = h_err.max(rel_err(&hess, &finite_difference_hessian(oracle, &v, 1e-6)));
        let scale = hess.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..n {
            for j in 0..i {
                if (hess[i * n + j] - hess[j * n + i]).abs() > 1e-10 * (1.0 + scale) {
                    symmetric = false;
                }
            }
        }
        match tag {
            Curvature::Affine => {
                if scale > 0.0 {
                    return Err(Error::CurvatureTag {
                        oracle: oracle.label(),
                        tag: tag.to_string(),
                        detail: format!("its Hessian has an entry of magnitude {scale:.3e}"),
                    });
                }
            }
            Curvature::Convex | Curvature::Concave => {
                let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &hess)).eigenvalues;
                let slack = 1e-9 * (1.0 + scale);
                let ok = match tag {
                    Curvature::Convex => eig.iter().all(|&e| e >= -slack),
                    _ => eig.iter().all(|&e| e <= slack),
                };
                curvature_ok &= ok;
            }
        }
    }
    Ok(OracleCheck {
        stage,
        role: role.to_string(),
        label: oracle.label(),
        points,
        gradient_rel_err: g_err,
        hessian_rel_err: h_err,
        hessian_symmetric: symmetric,
        curvature_ok,
        passed: points > 0 && g_err <= GRAD_TOL && h_err <= HESS_TOL && symmetric && curvature_ok,
    })
}

/// Runs the sampling-based assumption checks: finite-difference derivative
/// checks and curvature spot checks at points around the nominal
/// trajectory, noise support and zero-mean checks, and a per-stage Slater
/// check at the nominal point.
pub fn validate_instance(instance: &ProblemInstance, seed: u64) -> Result<ValidationReport> {
    instance.check()?;
    let stream = RngStream::new(seed);
    let config = SolverConfig::default();
    let wbar = instance.wbar().to_vec();
    let n_x = instance.dims.n_x;

    let origin = instance.concat(&instance.x1, &wbar, &vec![0.0; instance.dims.n_u]);
    for t in 1..=instance.horizon() {
        let stage = instance.stage(t);
        check_tag(stage.reward.as_ref(), "reward", &origin)?;
        for o in &stage.inequalities {
            check_tag(o.as_ref(), "inequality", &origin)?;
        }
        for o in &stage.equalities {
            check_tag(o.as_ref(), "equality", &origin)?;
        }
    }

    let mut slater = Vec::with_capacity(instance.horizon());
    let mut nominal = Vec::with_capacity(instance.horizon());
    let mut x = instance.x1.clone();
    let mut rollout_ok = true;
    for t in 1..=instance.horizon() {
        if !rollout_ok {
            slater.push(SlaterCheck {
                stage: t,
                strictly_feasible: false,
                margin: f64::NAN,
            });
            continue;
        }
        match strictly_feasible_control(instance, t, &x, &wbar, &config) {
            Ok(u) => {
                let bundle = feasible_set(instance, t, &x, &wbar)?;
                let worst = bundle
                    .inequality_values(&u)
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max);
                slater.push(SlaterCheck {
                    stage: t,
                    strictly_feasible: worst < 0.0,
                    margin: -worst,
                });
                nominal.push(instance.concat(&x, &wbar, &u));
                x = step_dynamics::<rand_chacha::ChaCha8Rng>(instance, t, &x, &wbar, &u, None)?;
            }
            Err(Error::Stage { source, .. }) if matches!(*source, Error::Infeasible { .. }) => {
                rollout_ok = false;
                slater.push(SlaterCheck {
                    stage: t,
                    strictly_feasible: false,
                    margin: f64::NAN,
                });
            }
            Err(e) => return Err(e),
        }
    }

    let mut oracles = Vec::new();
    for (k, center) in nominal.iter().enumerate() {
        let t = k + 1;
        let stage = instance.stage(t);
        let mut rng = stream.substream(0, t as u64, DrawPurpose::Validation);
        oracles.push(check_oracle(stage.reward.as_ref(), "reward", t, center, &mut rng)?);
        for o in &stage.inequalities {
            oracles.push(check_oracle(o.as_ref(), "inequality", t, center, &mut rng)?);
        }
        for o in &stage.equalities {
            oracles.push(check_oracle(o.as_ref(), "equality", t, center, &mut rng)?);
        }
    }

    let mut rng = stream.substream(1, 0, DrawPurpose::Exogenous);
    let (lo, hi) = instance.exo.support();
    let mut within = true;
    let mut mean = vec![0.0; instance.dims.n_w];
    for _ in 0..NOISE_DRAWS {
        let w = instance.exo.sample(&mut rng)?;
        within &= w.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| *v >= *l && *v <= *h);
        for (m, (v, c)) in mean.iter_mut().zip(w.iter().zip(&wbar)) {
            *m += (v - c) / NOISE_DRAWS as f64;
        }
    }
    let exo_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    let exo_threshold =
        4.0 * instance.exo.half_width.iter().map(|h| h * h).sum::<f64>().sqrt() / (NOISE_DRAWS as f64).sqrt();
    let exogenous = NoiseCheck {
        draws: NOISE_DRAWS,
        within_support: within,
        mean_norm: exo_norm,
        threshold: exo_threshold,
        passed: within && exo_norm <= exo_threshold,
    };

    let endogenous = {
        let v = nominal.first().unwrap_or(&origin);
        let bound = instance.endo.bound(n_x, v);
        let mut rng = stream.substream(1, 0, DrawPurpose::Endogenous);
        let mut within = true;
        let mut mean = vec![0.0; n_x];
        for _ in 0..NOISE_DRAWS {
            let e = instance.endo.sample(n_x, v, &mut rng)?;
            within &= e.iter().zip(&bound).all(|(e, b)| e.abs() <= *b);
            for (m, e) in mean.iter_mut().zip(&e) {
                *m += e / NOISE_DRAWS as f64;
            }
        }
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        let threshold = 4.0 * bound.iter().map(|b| b * b).sum::<f64>().sqrt() / (NOISE_DRAWS as f64).sqrt();
        NoiseCheck {
            draws: NOISE_DRAWS,
            within_support: within,
            mean_norm: norm,
            threshold,
            passed: within && norm <= threshold,
        }
    };

    let passed = oracles.iter().all(|o| o.passed)
        && slater.iter().all(|s| s.strictly_feasible)
        && exogenous.passed
        && endogenous.passed;
    Ok(ValidationReport {
        oracles,
        exogenous,
        endogenous,
        slater,
        passed,
    })
}
