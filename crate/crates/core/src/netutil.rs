//! The three-path, five-link diamond network with α-fair utility, link
//! degradation budgets and geometric flow lifetimes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{AffineOracle, AlphaFairUtility, LinkLoad, PathDelay, SmoothOracle};
use crate::problem::{AffineDynamics, AffineMap, Dims, EndogenousNoise, ExogenousNoise, ProblemInstance, StageSpec};

pub const N_PATHS: usize = 3;
pub const N_LINKS: usize = 5;

/// Paths → links: 1 → {1, 4}, 2 → {1, 3, 5}, 3 → {2, 5}.
pub const DIAMOND_INCIDENCE: [[u8; N_LINKS]; N_PATHS] = [[1, 0, 0, 1, 0], [1, 0, 1, 0, 1], [0, 1, 0, 0, 1]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub incidence: [[u8; N_LINKS]; N_PATHS],
    pub capacities: [f64; N_LINKS],
}

impl NetworkTopology {
    pub fn diamond(capacities: [f64; N_LINKS]) -> Self {
        Self {
            incidence: DIAMOND_INCIDENCE,
            capacities,
        }
    }

    /// Paths crossing link `l` (0-based).
    pub fn paths_on(&self, l: usize) -> Vec<usize> {
        (0..N_PATHS).filter(|&p| self.incidence[p][l] == 1).collect()
    }

    /// Links on path `p` (0-based).
    pub fn links_of(&self, p: usize) -> Vec<usize> {
        (0..N_LINKS).filter(|&l| self.incidence[p][l] == 1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkParams {
    pub x1: [f64; N_PATHS],
    pub wbar: [f64; N_PATHS],
    pub q: [f64; N_PATHS],
    pub alpha: f64,
    pub dmax: [f64; N_PATHS],
    pub c: [f64; N_LINKS],
    pub sigma: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
}

impl Default for NetworkParams {
    fn default() -> Self {
        reference_params(30, 1.0)
    }
}

pub fn reference_params(horizon: usize, sigma: f64) -> NetworkParams {
    NetworkParams {
        x1: [1.0, 1.0, 1.0],
        wbar: [2.0, 2.0, 2.0],
        q: [0.6, 0.7, 0.5],
        alpha: 0.5,
        dmax: [100.0, 100.0, 100.0],
        c: [6.0, 4.0, 3.0, 4.0, 6.0],
        sigma,
        horizon,
    }
}

fn parse_vec<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::dim(key, N, parts.len()));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| Error::param(key, format!("`{p}` is not a number")))?;
    }
    Ok(out)
}

impl NetworkParams {
    /// Applies one `key=value` override; vectors are comma separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let scalar = |v: &str| -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::param(key, format!("`{v}` is not a number")))
        };
        match key {
            "x1" => self.x1 = parse_vec(key, value)?,
            "wbar" => self.wbar = parse_vec(key, value)?,
            "q" => self.q = parse_vec(key, value)?,
            "dmax" | "D" => self.dmax = parse_vec(key, value)?,
            "c" => self.c = parse_vec(key, value)?,
            "alpha" => self.alpha = scalar(value)?,
            "sigma" => self.sigma = scalar(value)?,
            "T" | "horizon" => {
                self.horizon = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::param(key, format!("`{value}` is not a positive integer")))?
            }
            _ => return Err(Error::param(key, "unknown network parameter")),
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("T", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha", "must lie in (0, 1)"));
        }
        if self.q.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::param("q", "every entry must lie in (0, 1)"));
        }
        if self.c.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::param("c", "capacities must be positive"));
        }
        if self.dmax.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::param("dmax", "delay budgets must be positive"));
        }
        if self.wbar.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::param("wbar", "mean arrivals must be positive"));
        }
        if self.x1.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::param("x1", "initial occupations must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::param("sigma", "must be finite and nonnegative"));
        }
        let topo = NetworkTopology::diamond(self.c);
        let y = link_loads(&topo, &self.x1, &[0.0; N_PATHS]);
        for l in 0..N_LINKS {
            if y[l] >= self.c[l] {
                return Err(Error::param("x1", format!("initial load on link {} reaches capacity", l + 1)));
            }
        }
        for p in 0..N_PATHS {
            let d: f64 = topo.links_of(p).iter().map(|&l| 1.0 / (self.c[l] - y[l]) - 1.0 / self.c[l]).sum();
            if d >= self.dmax[p] {
                return Err(Error::param("x1", format!("initial delay on path {} exceeds its budget", p + 1)));
            }
        }
        Ok(())
    }
}

/// `d_l(y) = y / (c_l (c_l − y))` for `0 ≤ y < c_l`.
pub fn degradation(topology: &NetworkTopology, link: usize, y: f64) -> Result<f64> {
    let c = topology.capacities[link];
    if !(y < c) {
        return Err(Error::Domain {
            oracle: format!("degradation of link {} at load {y}", link + 1),
        });
    }
    Ok(1.0 / (c - y) - 1.0 / c)
}

/// `Y_l = Σ_p A[p][l] (x_p + u_p)`.
pub fn link_loads(topology: &NetworkTopology, x: &[f64], u: &[f64]) -> [f64; N_LINKS] {
    let mut y = [0.0; N_LINKS];
    for (l, yl) in y.iter_mut().enumerate() {
        *yl = topology.paths_on(l).iter().map(|&p| x[p] + u[p]).sum();
    }
    y
}

// Stage input layout: x at 0..3, w at 3..6, u at 6..9.
const NV: usize = 3 * N_PATHS;

fn xi(p: usize) -> usize {
    p
}
fn wi(p: usize) -> usize {
    N_PATHS + p
}
fn ui(p: usize) -> usize {
    2 * N_PATHS + p
}

fn link_indices(topology: &NetworkTopology, l: usize) -> Vec<usize> {
    topology.paths_on(l).into_iter().flat_map(|p| [xi(p), ui(p)]).collect()
}

fn stage_spec(params: &NetworkParams, topology: &NetworkTopology) -> StageSpec {
    let mut inequalities: Vec<Arc<dyn SmoothOracle>> = Vec::with_capacity(14);
    for p in 0..N_PATHS {
        inequalities.push(Arc::new(AffineOracle::coordinate(NV, ui(p), -1.0, 0.0, format!("u{} >= 0", p + 1))));
    }
    for p in 0..N_PATHS {
        let mut coeffs = vec![0.0; NV];
        coeffs[ui(p)] = 1.0;
        coeffs[wi(p)] = -1.0;
        inequalities.push(Arc::new(AffineOracle::new(coeffs, 0.0, format!("u{0} <= w{0}", p + 1))));
    }
    for l in 0..N_LINKS {
        let mut coeffs = vec![0.0; NV];
        for k in link_indices(topology, l) {
            coeffs[k] = 1.0;
        }
        inequalities.push(Arc::new(AffineOracle::new(
            coeffs,
            -params.c[l],
            format!("capacity of link {}", l + 1),
        )));
    }
    for p in 0..N_PATHS {
        let links = topology
            .links_of(p)
            .into_iter()
            .map(|l| LinkLoad {
                capacity: params.c[l],
                indices: link_indices(topology, l),
            })
            .collect();
        inequalities.push(Arc::new(PathDelay {
            dim: NV,
            links,
            budget: params.dmax[p],
            label: format!("delay of path {}", p + 1),
        }));
    }
    let reward = Arc::new(AlphaFairUtility {
        dim: NV,
        alpha: params.alpha,
        groups: (0..N_PATHS).map(|p| vec![xi(p), ui(p)]).collect(),
        label: "alpha-fair utility".into(),
    });
    StageSpec {
        reward,
        inequalities,
        equalities: Vec::new(),
    }
}

pub fn build_instance(params: &NetworkParams) -> Result<ProblemInstance> {
    params.check()?;
    let topology = NetworkTopology::diamond(params.c);
    let stage = stage_spec(params, &topology);

    let mut c = vec![vec![0.0; N_PATHS]; NV];
    let mut endo = vec![vec![0.0; NV]; N_PATHS];
    for p in 0..N_PATHS {
        c[xi(p)][p] = params.q[p];
        c[ui(p)][p] = params.q[p];
        let r = params.q[p].min(1.0 - params.q[p]);
        endo[p][xi(p)] = r;
        endo[p][ui(p)] = r;
    }
    let instance = ProblemInstance {
        name: "diamond".into(),
        dims: Dims {
            n_x: N_PATHS,
            n_u: N_PATHS,
            n_w: N_PATHS,
            horizon: params.horizon,
        },
        x1: params.x1.to_vec(),
        stages: vec![stage; params.horizon],
        dynamics: AffineDynamics::stationary(AffineMap {
            c,
            d: vec![0.0; N_PATHS],
        }),
        exo: ExogenousNoise {
            mean: params.wbar.to_vec(),
            half_width: params.wbar.to_vec(),
            sigma: params.sigma,
        },
        endo: EndogenousNoise::ProportionalTruncatedNormal {
            coeffs: endo,
            sigma: params.sigma,
        },
    };
    instance.check()?;
    Ok(instance)
}

/// One path over one link: the smallest member of the family, handy for
/// closed-form checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinglePathParams {
    pub x1: f64,
    pub wbar: f64,
    pub c: f64,
    pub q: f64,
    pub alpha: f64,
    pub dmax: f64,
    pub sigma: f64,
    pub horizon: usize,
}

impl Default for SinglePathParams {
    fn default() -> Self {
        Self {
            x1: 1.0,
            wbar: 2.0,
            c: 6.0,
            q: 0.5,
            alpha: 0.5,
            dmax: 1e6,
            sigma: 0.0,
            horizon: 1,
        }
    }
}

pub fn build_single_path(params: &SinglePathParams) -> Result<ProblemInstance> {
    if params.horizon == 0 {
        return Err(Error::param("T", "must be at least 1"));
    }
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(Error::param("alpha", "must lie in (0, 1)"));
    }
    if !(params.q > 0.0 && params.q < 1.0) {
        return Err(Error::param("q", "must lie in (0, 1)"));
    }
    if !(params.x1 > 0.0 && params.x1 < params.c && params.wbar > 0.0) {
        return Err(Error::param("x1", "need 0 < x1 < c and wbar > 0"));
    }
    let load = LinkLoad {
        capacity: params.c,
        indices: vec![0, 2],
    };
    let inequalities: Vec<Arc<dyn SmoothOracle>> = vec![
        Arc::new(AffineOracle::coordinate(3, 2, -1.0, 0.0, "u >= 0")),
        Arc::new(AffineOracle::new(vec![0.0, -1.0, 1.0], 0.0, "u <= w")),
        Arc::new(AffineOracle::new(vec![1.0, 0.0, 1.0], -params.c, "capacity")),
        Arc::new(PathDelay {
            dim: 3,
            links: vec![load],
            budget: params.dmax,
            label: "delay".into(),
        }),
    ];
    let stage = StageSpec {
        reward: Arc::new(AlphaFairUtility {
            dim: 3,
            alpha: params.alpha,
            groups: vec![vec![0, 2]],
            label: "alpha-fair utility".into(),
        }),
        inequalities,
        equalities: Vec::new(),
    };
    let r = params.q.min(1.0 - params.q);
    let instance = ProblemInstance {
        name: "single-path".into(),
        dims: Dims {
            n_x: 1,
            n_u: 1,
            n_w: 1,
            horizon: params.horizon,
        },
        x1: vec![params.x1],
        stages: vec![stage; params.horizon],
        dynamics: AffineDynamics::stationary(AffineMap {
            c: vec![vec![params.q], vec![0.0], vec![params.q]],
            d: vec![0.0],
        }),
        exo: ExogenousNoise {
            mean: vec![params.wbar],
            half_width: vec![params.wbar],
            sigma: params.sigma,
        },
        endo: EndogenousNoise::ProportionalTruncatedNormal {
            coeffs: vec![vec![r, 0.0, r]],
            sigma: params.sigma,
        },
    };
    instance.check()?;
    Ok(instance)
}
