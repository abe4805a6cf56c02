//! Reweighting map for screened RLOO.
//!
//! Admitting a prompt only when its first `n_init` rewards are mixed scales
//! the expected RLOO gradient by `Φ′(P)`, so screened training ascends
//! `Φ(P)` instead of `P`. `Φ` is pinned by `Φ(0) = 0`.

use crate::estimators::CurriculumShape;

/// `Φ′(p) = 1 − (n_cont/n)(pᵏ + (1−p)ᵏ) − (k·n_cont/(n(n−1)))(p(1−p)^{k−1} + (1−p)p^{k−1})`
/// with `k = n_init`, `n = n_init + n_cont` and `0⁰ = 1`.
pub fn phi_prime(p: f64, shape: CurriculumShape) -> f64 {
    let k = shape.n_init() as i32;
    let c = shape.n_cont() as f64;
    let n = shape.n_total() as f64;
    let q = 1.0 - p;
    let edge = p.powi(k) + q.powi(k);
    let near_edge = p * q.powi(k - 1) + q * p.powi(k - 1);
    1.0 - c / n * edge - (k as f64) * c / (n * (n - 1.0)) * near_edge
}

/// Antiderivative of [`phi_prime`] with `Φ(0) = 0`.
pub fn phi(p: f64, shape: CurriculumShape) -> f64 {
    phi_unpinned(p, shape) - phi_unpinned(0.0, shape)
}

fn phi_unpinned(p: f64, shape: CurriculumShape) -> f64 {
    let k = shape.n_init() as i32;
    let kf = k as f64;
    let c = shape.n_cont() as f64;
    let n = shape.n_total() as f64;
    let q = 1.0 - p;
    p - c / (n * (kf + 1.0)) * (p.powi(k + 1) - q.powi(k + 1))
        + c / (n * (n - 1.0) * (kf + 1.0)) * ((1.0 + kf * p) * q.powi(k) - p.powi(k) * (kf * q + 1.0))
}
