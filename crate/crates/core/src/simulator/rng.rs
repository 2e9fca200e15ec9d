//! Seeded random streams and the truncated-normal sampler.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// What a substream is used for. Policies never share a purpose with the
/// system noise, so draws stay coupled across policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DrawPurpose {
    Exogenous,
    Endogenous,
    Policy(u64),
    Validation,
}

impl DrawPurpose {
    fn code(self) -> (u64, u64) {
        match self {
            DrawPurpose::Exogenous => (1, 0),
            DrawPurpose::Endogenous => (2, 0),
            DrawPurpose::Policy(offset) => (3, offset),
            DrawPurpose::Validation => (4, 0),
        }
    }
}

/// Master seed from which independent ChaCha substreams are keyed by
/// `(replication, stage, purpose)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn substream(&self, replication: u64, stage: u64, purpose: DrawPurpose) -> ChaCha8Rng {
        let (kind, offset) = purpose.code();
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&replication.to_le_bytes());
        key[16..24].copy_from_slice(&stage.to_le_bytes());
        key[24..32].copy_from_slice(&(kind << 56 ^ offset).to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Inverse-CDF draw from `N(0, σ²)` conditioned on `[a, b]`.
///
/// `σ = 0` returns 0 (clamped into `[a, b]`). Draws are clamped into the
/// interval to absorb rounding at the tails.
pub fn sample_truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64, a: f64, b: f64) -> Result<f64> {
    if !(a <= b) {
        return Err(Error::param("bounds", format!("lower bound {a} exceeds upper bound {b}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be finite and nonnegative, got {sigma}")));
    }
    // Always consume one uniform so streams stay aligned across σ values.
    let u: f64 = rng.sample(Open01);
    if sigma == 0.0 || a == b {
        return Ok(0.0f64.clamp(a, b));
    }
    let n = standard_normal();
    let pa = n.cdf(a / sigma);
    let pb = n.cdf(b / sigma);
    let p = pa + u * (pb - pa);
    let x = sigma * n.inverse_cdf(p);
    Ok(if x.is_finite() { x.clamp(a, b) } else if p < 0.5 { a } else { b })
}

/// A direction uniform on the unit sphere of `R^dim`.
pub fn unit_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let n = standard_normal();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| n.inverse_cdf(rng.sample(Open01))).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 && norm.is_finite() {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
