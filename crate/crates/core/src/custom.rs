//! JSON description of a stationary instance built from the stock oracles.
//!
//! Every stage uses the same reward and constraints; all oracles act on the
//! concatenated stage input `(x, w, u)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{AffineOracle, AlphaFairUtility, Curvature, LinkLoad, PathDelay, QuadraticOracle, SmoothOracle};
use crate::problem::{AffineDynamics, AffineMap, Dims, EndogenousNoise, ExogenousNoise, ProblemInstance, StageSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Affine {
        coeffs: Vec<f64>,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        label: Option<String>,
    },
    /// `½ vᵀQv + cᵀv + k` with `Q` row-major.
    Quadratic {
        quad: Vec<f64>,
        linear: Vec<f64>,
        #[serde(default)]
        constant: f64,
        curvature: Curvature,
        #[serde(default)]
        label: Option<String>,
    },
    AlphaFair {
        alpha: f64,
        groups: Vec<Vec<usize>>,
        #[serde(default)]
        label: Option<String>,
    },
    PathDelay {
        links: Vec<LinkLoad>,
        budget: f64,
        #[serde(default)]
        label: Option<String>,
    },
}

impl OracleSpec {
    pub fn build(&self, dim: usize, fallback: &str) -> Result<Arc<dyn SmoothOracle>> {
        let name = |l: &Option<String>| l.clone().unwrap_or_else(|| fallback.to_string());
        let in_range = |idx: &[usize], what: &str| -> Result<()> {
            match idx.iter().find(|&&k| k >= dim) {
                Some(k) => Err(Error::param(format!("{fallback}.{what}"), format!("index {k} out of range for input of length {dim}"))),
                None => Ok(()),
            }
        };
        Ok(match self {
            OracleSpec::Affine { coeffs, offset, label } => {
                if coeffs.len() != dim {
                    return Err(Error::dim(format!("{fallback}.coeffs"), dim, coeffs.len()));
                }
                Arc::new(AffineOracle::new(coeffs.clone(), *offset, name(label)))
            }
            OracleSpec::Quadratic {
                quad,
                linear,
                constant,
                curvature,
                label,
            } => {
                if quad.len() != dim * dim {
                    return Err(Error::dim(format!("{fallback}.quad"), dim * dim, quad.len()));
                }
                if linear.len() != dim {
                    return Err(Error::dim(format!("{fallback}.linear"), dim, linear.len()));
                }
                Arc::new(QuadraticOracle::new(quad.clone(), linear.clone(), *constant, *curvature, name(label)))
            }
            OracleSpec::AlphaFair { alpha, groups, label } => {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    return Err(Error::param(format!("{fallback}.alpha"), "must lie in (0, 1)"));
                }
                for g in groups {
                    in_range(g, "groups")?;
                }
                Arc::new(AlphaFairUtility {
                    dim,
                    alpha: *alpha,
                    groups: groups.clone(),
                    label: name(label),
                })
            }
            OracleSpec::PathDelay { links, budget, label } => {
                for l in links {
                    in_range(&l.indices, "links")?;
                    if !(l.capacity > 0.0) {
                        return Err(Error::param(format!("{fallback}.links"), "capacities must be positive"));
                    }
                }
                Arc::new(PathDelay {
                    dim,
                    links: links.clone(),
                    budget: *budget,
                    label: name(label),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomInstance {
    #[serde(default = "default_name")]
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub x1: Vec<f64>,
    pub reward: OracleSpec,
    #[serde(default)]
    pub inequalities: Vec<OracleSpec>,
    #[serde(default)]
    pub equalities: Vec<OracleSpec>,
    pub dynamics: AffineMap,
    pub noise: ExogenousNoise,
    #[serde(default = "no_endogenous")]
    pub endogenous: EndogenousNoise,
}

fn default_name() -> String {
    "custom".into()
}

fn no_endogenous() -> EndogenousNoise {
    EndogenousNoise::None
}

impl CustomInstance {
    pub fn build(&self) -> Result<ProblemInstance> {
        let dims = Dims {
            n_x: self.n_x,
            n_u: self.n_u,
            n_w: self.n_w,
            horizon: self.horizon,
        };
        dims.check()?;
        let dim = dims.stage_input();
        let build_all = |specs: &[OracleSpec], prefix: &str| -> Result<Vec<Arc<dyn SmoothOracle>>> {
            specs.iter().enumerate().map(|(i, s)| s.build(dim, &format!("{prefix}[{i}]"))).collect()
        };
        let stage = StageSpec {
            reward: self.reward.build(dim, "reward")?,
            inequalities: build_all(&self.inequalities, "inequalities")?,
            equalities: build_all(&self.equalities, "equalities")?,
        };
        let instance = ProblemInstance {
            name: self.name.clone(),
            dims,
            x1: self.x1.clone(),
            stages: vec![stage; self.horizon],
            dynamics: AffineDynamics::stationary(self.dynamics.clone()),
            exo: self.noise.clone(),
            endo: self.endogenous.clone(),
        };
        instance.check()?;
        Ok(instance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relaxation::solve_rel_minus;
    use crate::solver::SolverConfig;

    const TOY: &str = r#"{
        "n_x": 1, "n_u": 1, "n_w": 1, "T": 2,
        "x1": [0.0],
        "reward": {"kind": "alpha_fair", "alpha": 0.5, "groups": [[2]]},
        "inequalities": [
            {"kind": "affine", "coeffs": [0, 0, -1], "label": "u >= 0"},
            {"kind": "affine", "coeffs": [0, -1, 1], "label": "u <= w"}
        ],
        "dynamics": {"c": [[1], [0], [0]], "d": [0]},
        "noise": {"mean": [3.0], "half_width": [1.0], "sigma": 0.5}
    }"#;

    #[test]
    fn toy_document_builds_and_solves() {
        let doc: CustomInstance = serde_json::from_str(TOY).unwrap();
        let inst = doc.build().unwrap();
        let plan = solve_rel_minus(&inst, 1, &inst.x1, &SolverConfig::default()).unwrap();
        // two stages of 2√u at u = w̄ = 3
        assert!((plan.value - 4.0 * 3f64.sqrt()).abs() < 1e-6, "{}", plan.value);
    }

    #[test]
    fn bad_documents_rejected() {
        let mut doc: CustomInstance = serde_json::from_str(TOY).unwrap();
        doc.inequalities[0] = OracleSpec::Affine {
            coeffs: vec![1.0],
            offset: 0.0,
            label: None,
        };
        assert!(matches!(doc.build(), Err(Error::DimensionMismatch { .. })));
        let extra = TOY.replacen("\"T\": 2,", "\"T\": 2, \"bogus\": 1,", 1);
        assert!(serde_json::from_str::<CustomInstance>(&extra).is_err());
        let mut doc: CustomInstance = serde_json::from_str(TOY).unwrap();
        doc.reward = OracleSpec::AlphaFair {
            alpha: 0.5,
            groups: vec![vec![7]],
            label: None,
        };
        assert!(doc.build().is_err());
    }
}
