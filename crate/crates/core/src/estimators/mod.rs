//! Policy-gradient estimators and the closed forms that describe them.
//!
//! The RLOO estimator averages `Â(y_i) ∇log π(y_i)` over a group of `n`
//! responses, where each advantage uses the mean reward of the other `n − 1`
//! responses as its baseline. [`enumerate`] computes its exact moments on a
//! tabular policy, [`snr`] turns those into signal-to-noise ratios, and
//! [`phi`] holds the reweighting map that describes what screening by a
//! small pilot group does to the expected gradient.

pub mod enumerate;
pub mod phi;
pub mod snr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SpeedError};
use crate::policy::GradientVector;

pub use enumerate::{
    gradient_estimator_moments_exact, screened_gradient_exact, EnumerationStrategy, Moments, DEFAULT_ENUMERATION_CAP,
};
pub use phi::{phi, phi_prime};
pub use snr::{
    snr_bound_proof, snr_bound_theorem, snr_exact, snr_monte_carlo, BoundStatus, ProofBound, SnrMethod, SnrReport,
    TheoremBound,
};

/// Binary rewards of one response group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardVector(Vec<bool>);

impl RewardVector {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(invalid("reward vector must be nonempty"));
        }
        Ok(Self(bits))
    }

    /// From 0/1 integers; anything else is rejected.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let bools = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(invalid(format!("reward {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bools)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// Success count `W`.
    pub fn successes(&self) -> usize {
        self.0.iter().filter(|&&r| r).count()
    }
}

/// Group sizes for two-phase generation: `n_init` screening responses
/// followed by `n_cont` continuation responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumShape {
    n_init: usize,
    n_cont: usize,
}

impl CurriculumShape {
    pub fn new(n_init: usize, n_cont: usize) -> Result<Self> {
        if n_init < 1 || n_cont < 1 {
            return Err(invalid(format!(
                "screening and continuation sizes must be at least 1 (got {n_init}, {n_cont})"
            )));
        }
        Ok(Self { n_init, n_cont })
    }

    pub fn n_init(&self) -> usize {
        self.n_init
    }

    pub fn n_cont(&self) -> usize {
        self.n_cont
    }

    pub fn n_total(&self) -> usize {
        self.n_init + self.n_cont
    }
}

/// Leave-one-out advantages: `r_i − (Σ_{j≠i} r_j)/(n − 1)`.
///
/// The baseline is formed from integer counts, so a group with identical
/// rewards yields exactly zero advantages.
pub fn rloo_advantages(rewards: &RewardVector) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(invalid("leave-one-out baseline needs at least two rewards"));
    }
    let total = rewards.successes();
    let denom = (n - 1) as f64;
    Ok(rewards
        .bits()
        .iter()
        .map(|&r| {
            let own = usize::from(r);
            own as f64 - (total - own) as f64 / denom
        })
        .collect())
}

/// Monte Carlo policy gradient `(1/N) Σ Â(y_i) ∇log π(y_i)` with RLOO
/// advantages. Summation runs in sample order.
pub fn policy_gradient_estimate(samples: &[(GradientVector, bool)]) -> Result<GradientVector> {
    if samples.len() < 2 {
        return Err(invalid("policy gradient estimate needs at least two samples"));
    }
    let dim = samples[0].0.len();
    if let Some((g, _)) = samples.iter().find(|(g, _)| g.len() != dim) {
        return Err(SpeedError::DimensionMismatch {
            expected: dim,
            found: g.len(),
        });
    }
    let rewards = RewardVector::new(samples.iter().map(|(_, r)| *r).collect())?;
    let advantages = rloo_advantages(&rewards)?;
    let rows = samples.iter().map(|(g, _)| g.as_slice());
    Ok(GradientVector::from_vec(weighted_mean(&advantages, rows, dim)))
}

/// `(1/N) Σ_i weights[i] · vectors[i]`, accumulated in order.
pub(crate) fn weighted_mean<'a>(weights: &[f64], vectors: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (&w, v) in weights.iter().zip(vectors) {
        if w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    let n = weights.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}
