//! Gaussian mechanism on exchanged tensors and its (ε, δ) accountant.
//!
//! Per exchange a tensor is clipped to L2 norm `C` and perturbed with
//! i.i.d. `N(0, σ²C²)` noise. A mechanism at noise scale `σ` with per-step
//! `δ1` is `(ε1, δ1)`-DP for `σ = sqrt(2 ln(1.25/δ1)) / ε1`; `T` invocations
//! compose to `ε' = sqrt(2T ln(1/δ')) ε1 + T ε1 (e^ε1 - 1)` and
//! `δ_total = T δ1 + δ'`.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("invalid privacy parameter: {0}")]
    OutOfRange(String),
    #[error("non-finite tensor passed to the mechanism")]
    NonFinite,
    #[error("party {party} {direction:?} ledger mixes noise settings")]
    Heterogeneous { party: u16, direction: Direction },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub enabled: bool,
    pub c1: f64,
    pub sigma1: f64,
    pub c2: f64,
    pub sigma2: f64,
    pub delta1: f64,
    pub delta_prime: f64,
    /// Also perturb activations sent during evaluation passes.
    pub in_evaluation: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            c1: 1.0,
            sigma1: 0.0,
            c2: 1.0,
            sigma2: 0.0,
            delta1: 1e-7,
            delta_prime: 1e-5,
            in_evaluation: false,
        }
    }
}

impl DpConfig {
    /// Enabled mechanism with `C1 = C2 = 1` and `σ1 = σ2 = sigma`.
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            enabled: true,
            sigma1: sigma,
            sigma2: sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DpError> {
        for (name, c) in [("c1", self.c1), ("c2", self.c2)] {
            if !(c > 0.0) {
                return Err(DpError::OutOfRange(format!("{name} = {c}")));
            }
        }
        for (name, s) in [("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(DpError::OutOfRange(format!("{name} = {s}")));
            }
        }
        for (name, d) in [("delta1", self.delta1), ("delta_prime", self.delta_prime)] {
            if !(d > 0.0 && d < 1.0) {
                return Err(DpError::OutOfRange(format!("{name} = {d}")));
            }
        }
        Ok(())
    }
}

/// `v / max(1, ‖v‖₂ / C) + N(0, σ²C²I)`. No noise is drawn when `σ = 0`.
pub fn clip_and_noise<R: Rng + ?Sized>(
    v: &Tensor,
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor, DpError> {
    if !(clip > 0.0) || !(sigma >= 0.0) {
        return Err(DpError::OutOfRange(format!("clip {clip}, sigma {sigma}")));
    }
    if !v.is_finite() {
        return Err(DpError::NonFinite);
    }
    let scale = (v.l2_norm() / clip).max(1.0);
    let mut out = v.map(|x| x / scale);
    if sigma > 0.0 {
        let std = sigma * clip;
        for x in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
    }
    Ok(out)
}

fn check_delta(delta: f64) -> Result<(), DpError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DpError::OutOfRange(format!("delta {delta}")));
    }
    Ok(())
}

/// Noise scale giving `(ε, δ)`-DP per step.
pub fn sigma_for(epsilon: f64, delta: f64) -> Result<f64, DpError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(DpError::OutOfRange(format!("epsilon {epsilon}")));
    }
    check_delta(delta)?;
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Inverse of [`sigma_for`] in `ε`.
pub fn epsilon_for(sigma: f64, delta: f64) -> Result<f64, DpError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DpError::OutOfRange(format!("sigma {sigma}")));
    }
    check_delta(delta)?;
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / sigma)
}

/// Strong composition of `t` mechanisms, returning `(ε', δ_total)`.
pub fn compose(epsilon1: f64, delta1: f64, t: u64, delta_prime: f64) -> Result<(f64, f64), DpError> {
    if t == 0 {
        return Err(DpError::OutOfRange("T = 0".into()));
    }
    if !(epsilon1 > 0.0 && epsilon1.is_finite()) {
        return Err(DpError::OutOfRange(format!("epsilon {epsilon1}")));
    }
    check_delta(delta1)?;
    check_delta(delta_prime)?;
    let tf = t as f64;
    let eps = (2.0 * tf * (1.0 / delta_prime).ln()).sqrt() * epsilon1
        + tf * epsilon1 * epsilon1.exp_m1();
    Ok((eps, tf.mul_add(delta1, delta_prime)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn index(self) -> u64 {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }
}

/// Noise generator for one party and direction, independent of every other
/// stream derived from the same seed.
pub fn noise_rng(seed: u64, party: u16, direction: Direction) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((party as u64) << 1 | direction.index()) + (1 << 32));
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub sigma: f64,
    pub clip: f64,
    pub step: u64,
}

/// Append-only record of mechanism invocations per party and direction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    entries: BTreeMap<(u16, Direction), Vec<LedgerEntry>>,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes a party/direction appear in reports even before any entry.
    pub fn register(&mut self, party: u16, direction: Direction) {
        self.entries.entry((party, direction)).or_default();
    }

    pub fn record(&mut self, party: u16, direction: Direction, sigma: f64, clip: f64, step: u64) {
        self.entries
            .entry((party, direction))
            .or_default()
            .push(LedgerEntry { sigma, clip, step });
    }

    pub fn entries(&self, party: u16, direction: Direction) -> &[LedgerEntry] {
        self.entries
            .get(&(party, direction))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn keys(&self) -> impl Iterator<Item = (u16, Direction)> + '_ {
        self.entries.keys().copied()
    }
}

/// Composed budget for one party and direction. `epsilon_prime` is `None`
/// when the recorded noise scale is zero (no privacy guarantee).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRecord {
    pub party: u16,
    pub direction: Direction,
    #[serde(rename = "T")]
    pub t: u64,
    pub sigma: Option<f64>,
    pub epsilon_prime: Option<f64>,
    pub delta_total: f64,
}

pub fn report_for(
    ledger: &PrivacyLedger,
    party: u16,
    direction: Direction,
    delta1: f64,
    delta_prime: f64,
) -> Result<PrivacyRecord, DpError> {
    check_delta(delta1)?;
    check_delta(delta_prime)?;
    let entries = ledger.entries(party, direction);
    let Some(first) = entries.first() else {
        return Ok(PrivacyRecord {
            party,
            direction,
            t: 0,
            sigma: None,
            epsilon_prime: Some(0.0),
            delta_total: delta_prime,
        });
    };
    if entries
        .iter()
        .any(|e| e.sigma.to_bits() != first.sigma.to_bits() || e.clip.to_bits() != first.clip.to_bits())
    {
        return Err(DpError::Heterogeneous { party, direction });
    }
    let t = entries.len() as u64;
    let delta_total = (t as f64).mul_add(delta1, delta_prime);
    let epsilon_prime = if first.sigma > 0.0 {
        Some(compose(epsilon_for(first.sigma, delta1)?, delta1, t, delta_prime)?.0)
    } else {
        None
    };
    Ok(PrivacyRecord {
        party,
        direction,
        t,
        sigma: Some(first.sigma),
        epsilon_prime,
        delta_total,
    })
}

pub fn ledger_report(
    ledger: &PrivacyLedger,
    delta1: f64,
    delta_prime: f64,
) -> Result<Vec<PrivacyRecord>, DpError> {
    ledger
        .keys()
        .map(|(p, d)| report_for(ledger, p, d, delta1, delta_prime))
        .collect()
}
