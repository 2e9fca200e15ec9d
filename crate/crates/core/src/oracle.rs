//! Smooth function oracles over a flat input vector.
//!
//! Stage functions see the concatenation `(x, w, u)`; the solver sees them
//! through [`crate::solver::Term`] slot maps that freeze some coordinates.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    Convex,
    Concave,
    Affine,
}

impl fmt::Display for Curvature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Curvature::Convex => "convex",
            Curvature::Concave => "concave",
            Curvature::Affine => "affine",
        };
        f.write_str(s)
    }
}

/// A twice-differentiable scalar function with value, gradient and Hessian
/// evaluators.
///
/// `hessian` writes a row-major `dim × dim` matrix and must overwrite every
/// entry. `in_domain` reports whether a point lies in the open domain; the
/// solver never evaluates outside it.
pub trait SmoothOracle: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn curvature(&self) -> Curvature;
    fn label(&self) -> String;
    fn value(&self, v: &[f64]) -> f64;
    fn gradient(&self, v: &[f64], out: &mut [f64]);
    fn hessian(&self, v: &[f64], out: &mut [f64]);

    fn in_domain(&self, _v: &[f64]) -> bool {
        true
    }
}

/// `coeffs · v + offset`.
#[derive(Debug, Clone)]
pub struct AffineOracle {
    pub coeffs: Vec<f64>,
    pub offset: f64,
    pub label: String,
}

impl AffineOracle {
    pub fn new(coeffs: Vec<f64>, offset: f64, label: impl Into<String>) -> Self {
        Self {
            coeffs,
            offset,
            label: label.into(),
        }
    }

    /// `sign * v[index] + offset` over a `dim`-wide input.
    pub fn coordinate(dim: usize, index: usize, sign: f64, offset: f64, label: impl Into<String>) -> Self {
        let mut coeffs = vec![0.0; dim];
        coeffs[index] = sign;
        Self::new(coeffs, offset, label)
    }
}

impl SmoothOracle for AffineOracle {
    fn dim(&self) -> usize {
        self.coeffs.len()
    }

    fn curvature(&self) -> Curvature {
        Curvature::Affine
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, v: &[f64]) -> f64 {
        dot(&self.coeffs, v) + self.offset
    }

    fn gradient(&self, _v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.coeffs);
    }

    fn hessian(&self, _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `½ vᵀQv + cᵀv + d` with a declared curvature tag.
///
/// The tag is trusted here; `validate_instance` spot-checks it.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    pub quad: Vec<f64>,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub curvature: Curvature,
    pub label: String,
}

impl QuadraticOracle {
    pub fn new(
        quad: Vec<f64>,
        linear: Vec<f64>,
        constant: f64,
        curvature: Curvature,
        label: impl Into<String>,
    ) -> Self {
        Self {
            quad,
            linear,
            constant,
            curvature,
            label: label.into(),
        }
    }

    /// `½‖v − target‖²`.
    pub fn squared_distance(target: &[f64], label: impl Into<String>) -> Self {
        let n = target.len();
        let mut quad = vec![0.0; n * n];
        for i in 0..n {
            quad[i * n + i] = 1.0;
        }
        let linear = target.iter().map(|t| -t).collect();
        let constant = 0.5 * dot(target, target);
        Self::new(quad, linear, constant, Curvature::Convex, label)
    }
}

impl SmoothOracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.linear.len()
    }

    fn curvature(&self) -> Curvature {
        self.curvature
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, v: &[f64]) -> f64 {
        let n = self.linear.len();
        let mut quad = 0.0;
        for i in 0..n {
            let row = &self.quad[i * n..(i + 1) * n];
            quad += v[i] * dot(row, v);
        }
        0.5 * quad + dot(&self.linear, v) + self.constant
    }

    fn gradient(&self, v: &[f64], out: &mut [f64]) {
        let n = self.linear.len();
        for i in 0..n {
            let mut acc = self.linear[i];
            for j in 0..n {
                acc += 0.5 * (self.quad[i * n + j] + self.quad[j * n + i]) * v[j];
            }
            out[i] = acc;
        }
    }

    fn hessian(&self, _v: &[f64], out: &mut [f64]) {
        let n = self.linear.len();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = 0.5 * (self.quad[i * n + j] + self.quad[j * n + i]);
            }
        }
    }
}

/// α-fair utility `Σ_g z_g^{1−α}/(1−α)` with `z_g = Σ_{k∈g} v_k`, for
/// `0 < α < 1`. The domain requires every `z_g > 0`.
#[derive(Debug, Clone)]
pub struct AlphaFairUtility {
    pub dim: usize,
    pub alpha: f64,
    pub groups: Vec<Vec<usize>>,
    pub label: String,
}

impl AlphaFairUtility {
    fn group_sum(&self, g: &[usize], v: &[f64]) -> f64 {
        g.iter().map(|&k| v[k]).sum()
    }
}

impl SmoothOracle for AlphaFairUtility {
    fn dim(&self) -> usize {
        self.dim
    }

    fn curvature(&self) -> Curvature {
        Curvature::Concave
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, v: &[f64]) -> f64 {
        let e = 1.0 - self.alpha;
        self.groups
            .iter()
            .map(|g| self.group_sum(g, v).powf(e) / e)
            .sum()
    }

    fn gradient(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for g in &self.groups {
            let d = self.group_sum(g, v).powf(-self.alpha);
            for &k in g {
                out[k] += d;
            }
        }
    }

    fn hessian(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let n = self.dim;
        for g in &self.groups {
            let z = self.group_sum(g, v);
            let dd = -self.alpha * z.powf(-self.alpha - 1.0);
            for &a in g {
                for &b in g {
                    out[a * n + b] += dd;
                }
            }
        }
    }

    fn in_domain(&self, v: &[f64]) -> bool {
        self.groups.iter().all(|g| self.group_sum(g, v) > 0.0)
    }
}

/// One link of a path: its capacity and the input coordinates summed into
/// its load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkLoad {
    pub capacity: f64,
    pub indices: Vec<usize>,
}

/// Path degradation constraint `Σ_l d_l(y_l) − budget`, with the M/M/1-style
/// link degradation `d(y) = 1/(c − y) − 1/c`. Domain: every `y_l < c_l`.
#[derive(Debug, Clone)]
pub struct PathDelay {
    pub dim: usize,
    pub links: Vec<LinkLoad>,
    pub budget: f64,
    pub label: String,
}

impl PathDelay {
    fn load(link: &LinkLoad, v: &[f64]) -> f64 {
        link.indices.iter().map(|&k| v[k]).sum()
    }
}

impl SmoothOracle for PathDelay {
    fn dim(&self) -> usize {
        self.dim
    }

    fn curvature(&self) -> Curvature {
        Curvature::Convex
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, v: &[f64]) -> f64 {
        let total: f64 = self
            .links
            .iter()
            .map(|l| {
                let y = Self::load(l, v);
                1.0 / (l.capacity - y) - 1.0 / l.capacity
            })
            .sum();
        total - self.budget
    }

    fn gradient(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for l in &self.links {
            let gap = l.capacity - Self::load(l, v);
            let d = 1.0 / (gap * gap);
            for &k in &l.indices {
                out[k] += d;
            }
        }
    }

    fn hessian(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let n = self.dim;
        for l in &self.links {
            let gap = l.capacity - Self::load(l, v);
            let dd = 2.0 / (gap * gap * gap);
            for &a in &l.indices {
                for &b in &l.indices {
                    out[a * n + b] += dd;
                }
            }
        }
    }

    fn in_domain(&self, v: &[f64]) -> bool {
        self.links.iter().all(|l| Self::load(l, v) < l.capacity)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient with per-coordinate step `h·(1 + |v_k|)`.
pub fn finite_difference_gradient(oracle: &dyn SmoothOracle, v: &[f64], h: f64) -> Vec<f64> {
    let mut p = v.to_vec();
    (0..v.len())
        .map(|k| {
            let step = h * (1.0 + v[k].abs());
            p[k] = v[k] + step;
            let fp = oracle.value(&p);
            p[k] = v[k] - step;
            let fm = oracle.value(&p);
            p[k] = v[k];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Central differences of the analytic gradient, row-major.
pub fn finite_difference_hessian(oracle: &dyn SmoothOracle, v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    let mut p = v.to_vec();
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let mut out = vec![0.0; n * n];
    for k in 0..n {
        let step = h * (1.0 + v[k].abs());
        p[k] = v[k] + step;
        oracle.gradient(&p, &mut gp);
        p[k] = v[k] - step;
        oracle.gradient(&p, &mut gm);
        p[k] = v[k];
        for i in 0..n {
            out[i * n + k] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    out
}
