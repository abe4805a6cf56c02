//! Exact moments of the RLOO gradient estimator by enumeration.
//!
//! Two routes are provided. [`EnumerationStrategy::Tuples`] walks every
//! response tuple `(y_1, …, y_n) ∈ [M]^n`, weights it by `Π π(y_i)` and
//! evaluates the estimator literally. [`EnumerationStrategy::RewardClasses`]
//! uses the fact that, conditional on the reward pattern, responses are
//! independent draws from the policy restricted to the correct or incorrect
//! class. The estimator is symmetric in its samples, so it suffices to
//! enumerate success counts, which costs `O(n · M)` instead of `O(M^n)`.

use crate::error::{invalid, Result, SpeedError};
use crate::estimators::{policy_gradient_estimate, CurriculumShape};
use crate::policy::{class_masses, logprob_grad, score_row, GradientVector, PolicyParams, TaskInstance};

pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EnumerationStrategy {
    #[default]
    RewardClasses,
    Tuples,
}

/// First two moments of the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: GradientVector,
    /// `E‖ĝ − Eĝ‖²`.
    pub covariance_trace: f64,
}

pub fn gradient_estimator_moments_exact(params: &PolicyParams, task: &TaskInstance, n: usize) -> Result<Moments> {
    gradient_estimator_moments_with(params, task, n, EnumerationStrategy::default(), DEFAULT_ENUMERATION_CAP)
}

pub fn gradient_estimator_moments_with(
    params: &PolicyParams,
    task: &TaskInstance,
    n: usize,
    strategy: EnumerationStrategy,
    cap: u64,
) -> Result<Moments> {
    if n < 2 {
        return Err(invalid("estimator moments need a group of at least two"));
    }
    match strategy {
        EnumerationStrategy::RewardClasses => {
            check_cap((n + 1) as f64, cap)?;
            let stats = ClassStats::new(params, task)?;
            Ok(stats.moments(n))
        }
        EnumerationStrategy::Tuples => {
            check_cap((params.responses() as f64).powi(n as i32), cap)?;
            tuple_moments(params, task, n, None)
        }
    }
}

/// `E[1(0 < W_init < n_init) · ĝ]` for a group of `n_total` responses whose
/// first `n_init` decide admission.
pub fn screened_gradient_exact(
    params: &PolicyParams,
    task: &TaskInstance,
    shape: CurriculumShape,
) -> Result<GradientVector> {
    screened_gradient_with(
        params,
        task,
        shape,
        EnumerationStrategy::default(),
        DEFAULT_ENUMERATION_CAP,
    )
}

pub fn screened_gradient_with(
    params: &PolicyParams,
    task: &TaskInstance,
    shape: CurriculumShape,
    strategy: EnumerationStrategy,
    cap: u64,
) -> Result<GradientVector> {
    let n = shape.n_total();
    match strategy {
        EnumerationStrategy::RewardClasses => {
            check_cap(((shape.n_init() + 1) * (shape.n_cont() + 1)) as f64, cap)?;
            let stats = ClassStats::new(params, task)?;
            Ok(stats.screened_mean(shape))
        }
        EnumerationStrategy::Tuples => {
            check_cap((params.responses() as f64).powi(n as i32), cap)?;
            Ok(tuple_moments(params, task, n, Some(shape.n_init()))?.mean)
        }
    }
}

fn check_cap(required: f64, cap: u64) -> Result<()> {
    if required > cap as f64 {
        return Err(SpeedError::EnumerationCap { required, cap });
    }
    Ok(())
}

/// Brute force over `[M]^n`. With `screen = Some(k)` the estimate is zeroed
/// unless the first `k` rewards are mixed.
fn tuple_moments(params: &PolicyParams, task: &TaskInstance, n: usize, screen: Option<usize>) -> Result<Moments> {
    let masses = class_masses(params, task)?;
    let m = params.responses();
    let dim = params.param_count();
    let scores: Vec<GradientVector> = (0..m)
        .map(|y| logprob_grad(params, masses.context, y))
        .collect::<Result<_>>()?;

    let mut mean = GradientVector::zeros(dim);
    let mut second = 0.0;
    let mut tuple = vec![0usize; n];
    loop {
        let weight: f64 = tuple.iter().map(|&y| masses.probs[y]).product();
        if weight > 0.0 {
            let admitted = screen.is_none_or(|k| {
                let wins = tuple[..k].iter().filter(|&&y| masses.is_correct[y]).count();
                wins != 0 && wins != k
            });
            if admitted {
                let samples: Vec<(GradientVector, bool)> = tuple
                    .iter()
                    .map(|&y| (scores[y].clone(), masses.is_correct[y]))
                    .collect();
                let est = policy_gradient_estimate(&samples)?;
                second += weight * est.norm_sq();
                mean.add_scaled(&est, weight);
            }
        }
        // Odometer increment.
        let mut pos = 0;
        while pos < n {
            tuple[pos] += 1;
            if tuple[pos] < m {
                break;
            }
            tuple[pos] = 0;
            pos += 1;
        }
        if pos == n {
            break;
        }
    }
    let covariance_trace = (second - mean.norm_sq()).max(0.0);
    Ok(Moments { mean, covariance_trace })
}

/// Per-class conditional score statistics for one task.
struct ClassStats {
    dim: usize,
    offset: usize,
    pass: f64,
    fail: f64,
    /// `E[∇log π(y) | y correct]`, context row only.
    mean_correct: Vec<f64>,
    mean_incorrect: Vec<f64>,
    /// `E[‖∇log π(y) − mean‖² | class]`.
    spread_correct: f64,
    spread_incorrect: f64,
}

impl ClassStats {
    fn new(params: &PolicyParams, task: &TaskInstance) -> Result<Self> {
        let masses = class_masses(params, task)?;
        let m = params.responses();
        let scores: Vec<Vec<f64>> = (0..m).map(|y| score_row(&masses.probs, y)).collect();

        let class_moments = |want: bool, mass: f64| -> (Vec<f64>, f64) {
            let mut mean = vec![0.0; m];
            if mass <= 0.0 {
                return (mean, 0.0);
            }
            let members = || (0..m).filter(|&y| masses.is_correct[y] == want);
            for y in members() {
                let w = masses.probs[y] / mass;
                mean.iter_mut().zip(&scores[y]).for_each(|(a, s)| *a += w * s);
            }
            let spread = members()
                .map(|y| {
                    let w = masses.probs[y] / mass;
                    w * scores[y]
                        .iter()
                        .zip(&mean)
                        .map(|(s, mu)| (s - mu) * (s - mu))
                        .sum::<f64>()
                })
                .sum();
            (mean, spread)
        };
        let (mean_correct, spread_correct) = class_moments(true, masses.pass);
        let (mean_incorrect, spread_incorrect) = class_moments(false, masses.fail);
        Ok(Self {
            dim: params.param_count(),
            offset: params.flat_index(masses.context, 0),
            pass: masses.pass,
            fail: masses.fail,
            mean_correct,
            mean_incorrect,
            spread_correct,
            spread_incorrect,
        })
    }

    /// Probability of one specific reward pattern with `w` successes out of `n`.
    fn pattern_prob(&self, w: usize, n: usize) -> f64 {
        self.pass.powi(w as i32) * self.fail.powi((n - w) as i32)
    }

    /// RLOO advantages of a success and of a failure when the group has `w`
    /// successes out of `n`.
    fn advantages(w: usize, n: usize) -> (f64, f64) {
        let denom = (n - 1) as f64;
        let win = if w > 0 { 1.0 - (w - 1) as f64 / denom } else { 0.0 };
        let loss = -(w as f64) / denom;
        (win, loss)
    }

    /// `E[ĝ | W = w]` on the context row.
    fn conditional_mean(&self, w: usize, n: usize) -> Vec<f64> {
        let (win, loss) = Self::advantages(w, n);
        let a = w as f64 * win / n as f64;
        let b = (n - w) as f64 * loss / n as f64;
        self.mean_correct
            .iter()
            .zip(&self.mean_incorrect)
            .map(|(c, i)| a * c + b * i)
            .collect()
    }

    /// `tr Cov[ĝ | W = w]`.
    fn conditional_spread(&self, w: usize, n: usize) -> f64 {
        let (win, loss) = Self::advantages(w, n);
        let n2 = (n * n) as f64;
        (w as f64 * win * win * self.spread_correct + (n - w) as f64 * loss * loss * self.spread_incorrect) / n2
    }

    fn embed(&self, row: Vec<f64>) -> GradientVector {
        let mut out = GradientVector::zeros(self.dim);
        out.as_mut_slice()[self.offset..self.offset + row.len()].copy_from_slice(&row);
        out
    }

    fn moments(&self, n: usize) -> Moments {
        let classes: Vec<(f64, Vec<f64>)> = (0..=n)
            .map(|w| (binomial(n, w) * self.pattern_prob(w, n), w))
            .filter(|&(p, _)| p > 0.0)
            .map(|(p, w)| (p, self.conditional_mean(w, n)))
            .collect();
        let mut mean = vec![0.0; self.mean_correct.len()];
        for (p, cond) in &classes {
            mean.iter_mut().zip(cond).for_each(|(m, c)| *m += p * c);
        }
        // Law of total variance; every term is nonnegative.
        let mut trace = 0.0;
        for w in 0..=n {
            let p = binomial(n, w) * self.pattern_prob(w, n);
            if p > 0.0 {
                trace += p * self.conditional_spread(w, n);
            }
        }
        for (p, cond) in &classes {
            let dev: f64 = cond.iter().zip(&mean).map(|(c, m)| (c - m) * (c - m)).sum();
            trace += p * dev;
        }
        Moments {
            mean: self.embed(mean),
            covariance_trace: trace,
        }
    }

    fn screened_mean(&self, shape: CurriculumShape) -> GradientVector {
        let (k, c, n) = (shape.n_init(), shape.n_cont(), shape.n_total());
        let mut mean = vec![0.0; self.mean_correct.len()];
        for w_init in 1..k {
            for w_cont in 0..=c {
                let w = w_init + w_cont;
                let p = binomial(k, w_init) * binomial(c, w_cont) * self.pattern_prob(w, n);
                if p == 0.0 {
                    continue;
                }
                let cond = self.conditional_mean(w, n);
                mean.iter_mut().zip(&cond).for_each(|(m, x)| *m += p * x);
            }
        }
        self.embed(mean)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
