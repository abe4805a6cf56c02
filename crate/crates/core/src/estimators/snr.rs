//! Signal-to-noise ratio of the RLOO gradient estimator.
//!
//! `SNR = ‖Eĝ‖² / E‖ĝ − Eĝ‖²`. Three forms are available: exact (by
//! enumeration on a tabular policy), Monte Carlo, and two closed-form upper
//! bounds in terms of the pass rate `p` and group size `n`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimators::enumerate::gradient_estimator_moments_exact;
use crate::estimators::{rloo_advantages, weighted_mean, RewardVector};
use crate::policy::{draw_categorical, policy_probs, score_row, PolicyParams, TaskInstance, TaskKind};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnrMethod {
    Enumeration,
    MonteCarlo,
    Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    /// `‖Eĝ‖²`.
    pub signal: f64,
    /// `tr Cov[ĝ]`.
    pub noise: f64,
    /// `signal / noise`; infinite when only the noise vanishes, `None` when
    /// both vanish (no information either way).
    pub ratio: Option<f64>,
    pub method: SnrMethod,
    /// Standard error of `ratio` for Monte Carlo reports (delta method).
    pub mc_stderr: Option<f64>,
}

impl SnrReport {
    pub fn from_parts(signal: f64, noise: f64, method: SnrMethod, mc_stderr: Option<f64>) -> Self {
        let ratio = match (signal > 0.0, noise > 0.0) {
            (_, true) => Some(signal / noise),
            (true, false) => Some(f64::INFINITY),
            (false, false) => None,
        };
        Self {
            signal,
            noise,
            ratio,
            method,
            mc_stderr,
        }
    }

    pub fn is_undefined(&self) -> bool {
        self.ratio.is_none()
    }
}

pub fn snr_exact(params: &PolicyParams, task: &TaskInstance, n: usize) -> Result<SnrReport> {
    let moments = gradient_estimator_moments_exact(params, task, n)?;
    Ok(SnrReport::from_parts(
        moments.mean.norm_sq(),
        moments.covariance_trace,
        SnrMethod::Enumeration,
        None,
    ))
}

/// Monte Carlo SNR from `trials` pairs of independent estimates.
///
/// For each pair `(a, b)`, `⟨a, b⟩` is unbiased for `‖Eĝ‖²` and
/// `½‖a − b‖²` is unbiased for `tr Cov[ĝ]`. A negative signal estimate is
/// reported as zero.
pub fn snr_monte_carlo(
    params: &PolicyParams,
    task: &TaskInstance,
    n: usize,
    trials: usize,
    rng: &mut RngStream,
) -> Result<SnrReport> {
    if trials < 100 {
        return Err(invalid("Monte Carlo SNR needs at least 100 trials"));
    }
    if n < 2 {
        return Err(invalid("RLOO estimate needs a group of at least two"));
    }
    task.validate(params)?;
    let (context, correct) = match &task.kind {
        TaskKind::PolicyBacked { context, correct } => (*context, correct),
        TaskKind::Latent { .. } => return Err(crate::error::SpeedError::LatentTask(task.id)),
    };
    let probs = policy_probs(params, context)?;
    let m = params.responses();
    let scores: Vec<Vec<f64>> = (0..m).map(|y| score_row(&probs, y)).collect();

    let draw = |rng: &mut RngStream| -> Result<Vec<f64>> {
        let ys: Vec<usize> = (0..n).map(|_| draw_categorical(&probs, rng)).collect();
        let rewards = RewardVector::new(ys.iter().map(|y| correct.binary_search(y).is_ok()).collect())?;
        let adv = rloo_advantages(&rewards)?;
        Ok(weighted_mean(&adv, ys.iter().map(|&y| scores[y].as_slice()), m))
    };

    let mut signals = Vec::with_capacity(trials);
    let mut noises = Vec::with_capacity(trials);
    for _ in 0..trials {
        let a = draw(rng)?;
        let b = draw(rng)?;
        signals.push(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>());
        noises.push(0.5 * a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
    }
    let t = trials as f64;
    let s_bar = signals.iter().sum::<f64>() / t;
    let n_bar = noises.iter().sum::<f64>() / t;
    let signal = s_bar.max(0.0);
    let stderr = if n_bar > 0.0 {
        let r = s_bar / n_bar;
        let var = signals
            .iter()
            .zip(&noises)
            .map(|(s, v)| {
                let d = s - r * v;
                d * d
            })
            .sum::<f64>()
            / (t - 1.0);
        (var / t).sqrt() / n_bar
    } else {
        0.0
    };
    Ok(SnrReport::from_parts(
        signal,
        n_bar,
        SnrMethod::MonteCarlo,
        Some(stderr),
    ))
}

/// `4 n p (1 − p)`, with `valid` set where the bound is claimed to hold:
/// `n ≥ 3` and `p ∉ [1/4, 3/4]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremBound {
    pub value: f64,
    pub valid: bool,
}

pub fn snr_bound_theorem(p: f64, n: usize) -> Result<TheoremBound> {
    check_rate(p)?;
    if n < 1 {
        return Err(invalid("group size must be at least 1"));
    }
    Ok(TheoremBound {
        value: 4.0 * n as f64 * p * (1.0 - p),
        valid: n >= 3 && !(0.25..=0.75).contains(&p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStatus {
    Interior,
    /// `p ∈ {0, 1}`; the closed form is singular and its limit, 0, is returned.
    Boundary,
    /// The bracketed denominator is not positive; `+∞` is returned.
    NonPositiveBracket,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProofBound {
    pub value: f64,
    pub status: BoundStatus,
}

/// SNR upper bound from the reward-conditional covariance:
/// `[1/(n p(1−p)) + (n−2)(n−3)/(n(n−1)) − 1]^{-1}`.
pub fn snr_bound_proof(p: f64, n: usize) -> Result<ProofBound> {
    check_rate(p)?;
    if n < 2 {
        return Err(invalid("group size must be at least 2"));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(ProofBound {
            value: 0.0,
            status: BoundStatus::Boundary,
        });
    }
    let nf = n as f64;
    let bracket = 1.0 / (nf * p * (1.0 - p)) + ((n - 2) * (n.saturating_sub(3))) as f64 / (nf * (nf - 1.0)) - 1.0;
    if bracket <= 0.0 {
        return Ok(ProofBound {
            value: f64::INFINITY,
            status: BoundStatus::NonPositiveBracket,
        });
    }
    Ok(ProofBound {
        value: 1.0 / bracket,
        status: BoundStatus::Interior,
    })
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("pass rate {p} outside [0, 1]")));
    }
    Ok(())
}
