//! Importance weights that undo label noise, the ranking matrix `A` and the
//! regression target `M = βY - γA`.
//!
//! For an observed label `y` with noisy posterior `P = P_D(y | x)` the weight
//! is `ω = (P - ρ_into) / ((1 - ρ₊ - ρ₋) P)`, where `ρ_into` is the rate of
//! flipping *into* the observed value (`ρ₋` for `y = +1`, `ρ₊` for `y = -1`).
//! With exact posteriors this equals `P_G(y | x) / P_D(y | x)`.

use nalgebra::DMatrix;

use crate::data_stream::NoiseSpec;
use crate::error::{Error, Result};

pub const DEFAULT_OMEGA_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct OmegaMatrix {
    pub values: DMatrix<f64>,
    pub clamp_max: f64,
}

impl OmegaMatrix {
    /// All-ones weights, i.e. the noise-unaware ranking loss.
    pub fn ones(n: usize, q: usize) -> Self {
        OmegaMatrix {
            values: DMatrix::from_element(n, q, 1.0),
            clamp_max: DEFAULT_OMEGA_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingMatrix {
    pub a: DMatrix<f64>,
}

fn check_same(context: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// Weights before clamping; entries may be negative or large.
pub fn compute_omega_unclamped(posteriors: &DMatrix<f64>, y: &DMatrix<f64>, spec: &NoiseSpec) -> Result<DMatrix<f64>> {
    check_same("compute_omega", posteriors, y)?;
    if spec.n_labels() != y.ncols() {
        return Err(Error::shape("compute_omega", spec.n_labels(), y.ncols()));
    }
    let (rp, rm) = (spec.rho_plus(), spec.rho_minus());
    Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |t, j| {
        let p = posteriors[(t, j)];
        let into = if y[(t, j)] > 0.0 { rm[j] } else { rp[j] };
        (p - into) / ((1.0 - rp[j] - rm[j]) * p)
    }))
}

pub fn compute_omega(posteriors: &DMatrix<f64>, y: &DMatrix<f64>, spec: &NoiseSpec, clamp_max: f64) -> Result<OmegaMatrix> {
    let raw = compute_omega_unclamped(posteriors, y, spec)?;
    Ok(OmegaMatrix {
        values: raw.map(|w| if w.is_nan() { 0.0 } else { w.clamp(0.0, clamp_max) }),
        clamp_max,
    })
}

/// Exact `P_D(observed | x)` given `P_G(+1 | x)` per entry and the flip rates.
pub fn observed_posteriors_from_truth(
    truth_prob: &DMatrix<f64>,
    observed: &DMatrix<f64>,
    spec: &NoiseSpec,
) -> Result<DMatrix<f64>> {
    check_same("observed_posteriors_from_truth", truth_prob, observed)?;
    if spec.n_labels() != observed.ncols() {
        return Err(Error::shape("observed_posteriors_from_truth", spec.n_labels(), observed.ncols()));
    }
    let (rp, rm) = (spec.rho_plus(), spec.rho_minus());
    Ok(DMatrix::from_fn(observed.nrows(), observed.ncols(), |t, j| {
        let g = truth_prob[(t, j)];
        let p_plus = (1.0 - rp[j]) * g + rm[j] * (1.0 - g);
        if observed[(t, j)] > 0.0 {
            p_plus
        } else {
            1.0 - p_plus
        }
    }))
}

/// Oracle posteriors for deterministic ground-truth labels.
pub fn oracle_posteriors(truth: &DMatrix<f64>, observed: &DMatrix<f64>, spec: &NoiseSpec) -> Result<DMatrix<f64>> {
    let prob = truth.map(|g| if g > 0.0 { 1.0 } else { 0.0 });
    observed_posteriors_from_truth(&prob, observed, spec)
}

/// `A[t][j] = ω_tj Σ_k ω_tk (y_tk - y_tj) / 2`.
pub fn build_ranking_matrix(omega: &OmegaMatrix, y: &DMatrix<f64>) -> Result<RankingMatrix> {
    let w = &omega.values;
    check_same("build_ranking_matrix", w, y)?;
    let mut a = DMatrix::zeros(y.nrows(), y.ncols());
    for t in 0..y.nrows() {
        let total: f64 = w.row(t).sum();
        let signed: f64 = w.row(t).iter().zip(y.row(t).iter()).map(|(wk, yk)| wk * yk).sum();
        for j in 0..y.ncols() {
            a[(t, j)] = w[(t, j)] * 0.5 * (signed - y[(t, j)] * total);
        }
    }
    Ok(RankingMatrix { a })
}

pub fn build_target_matrix(y: &DMatrix<f64>, a: &RankingMatrix, beta: f64, gamma: f64) -> Result<DMatrix<f64>> {
    check_same("build_target_matrix", y, &a.a)?;
    Ok(y * beta - &a.a * gamma)
}

/// `Σ_t Σ_j Σ_k ω_tj ω_tk (y_tk - y_tj)/2 (o_tj - o_tk)`, evaluated term by term.
pub fn unbiased_ranking_loss(o: &DMatrix<f64>, y: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<f64> {
    check_same("unbiased_ranking_loss", o, y)?;
    check_same("unbiased_ranking_loss", omega, y)?;
    let q = y.ncols();
    let mut total = 0.0;
    for t in 0..y.nrows() {
        for j in 0..q {
            for k in 0..q {
                let pair = 0.5 * (y[(t, k)] - y[(t, j)]);
                total += omega[(t, j)] * omega[(t, k)] * pair * (o[(t, j)] - o[(t, k)]);
            }
        }
    }
    Ok(total)
}

/// Ranking loss with `f(x) = -x` on ground-truth labels.
pub fn clean_ranking_loss(o: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    check_same("clean_ranking_loss", o, g)?;
    let q = g.ncols();
    let mut total = 0.0;
    for t in 0..g.nrows() {
        for j in 0..q {
            for k in 0..q {
                total -= 0.5 * (g[(t, j)] - g[(t, k)]) * (o[(t, j)] - o[(t, k)]);
            }
        }
    }
    Ok(total)
}
