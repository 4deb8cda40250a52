//! Random sigmoid hidden layer and the per-chunk probability model that
//! supplies noisy-label posteriors to the importance weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_stream::rng_for;
use crate::error::{Error, Result};

/// Default posterior clamp; keeps the importance-weight ratio finite.
pub const DEFAULT_POSTERIOR_FLOOR: f64 = 0.05;

pub fn sigmoid(x: f64) -> f64 {
    // Clamped so the open-interval guarantee survives f64 rounding.
    (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Frozen input weights (`L x d`, uniform on `[-1, 1]`) and biases
/// (uniform on `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenMap {
    weights: DMatrix<f64>,
    biases: DVector<f64>,
    seed: u64,
}

impl HiddenMap {
    pub fn from_parts(weights: DMatrix<f64>, biases: DVector<f64>) -> Result<Self> {
        if weights.nrows() != biases.len() || weights.nrows() == 0 {
            return Err(Error::shape("hidden map", weights.nrows(), biases.len()));
        }
        Ok(HiddenMap {
            weights,
            biases,
            seed: 0,
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &DVector<f64> {
        &self.biases
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.weights.ncols()
    }

    /// `H[t][l] = sigmoid(w_l . x_t + b_l)`.
    pub fn map_features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.n_inputs() {
            return Err(Error::shape("map_features", self.n_inputs(), x.ncols()));
        }
        let mut h = x * self.weights.transpose();
        for (l, mut col) in h.column_iter_mut().enumerate() {
            let b = self.biases[l];
            col.apply(|v| *v = sigmoid(*v + b));
        }
        Ok(h)
    }
}

pub fn init_hidden_map(d: usize, hidden: usize, seed: u64) -> Result<HiddenMap> {
    if d == 0 || hidden == 0 {
        return Err(Error::Config(format!(
            "hidden map needs positive dimensions, got d={d}, L={hidden}"
        )));
    }
    let mut rng = rng_for(seed, 10);
    // Row-major draw order: weights of node 0 first.
    let mut w = Vec::with_capacity(hidden * d);
    for _ in 0..hidden * d {
        w.push(rng.random_range(-1.0..=1.0));
    }
    let biases = DVector::from_fn(hidden, |_, _| rng.random_range(0.0..=1.0));
    Ok(HiddenMap {
        weights: DMatrix::from_row_slice(hidden, d, &w),
        biases,
        seed,
    })
}

/// Per-feature standardization fitted on the initialization chunk only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let scale = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::shape("standardize", self.mean.len(), x.ncols()));
        }
        let mut out = x.clone();
        for (k, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[k], self.scale[k]);
            col.apply(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

/// Ridge regression from hidden features to observed labels, trained on a
/// single chunk and then thrown away.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbModel {
    pub coeffs: DMatrix<f64>,
    pub ridge: f64,
}

pub fn fit_chunk_probability_model(h: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<ProbModel> {
    if h.nrows() != y.nrows() {
        return Err(Error::shape("fit_chunk_probability_model", h.nrows(), y.nrows()));
    }
    if !(ridge > 0.0) {
        return Err(Error::Config(format!("probability-model ridge must be positive, got {ridge}")));
    }
    let l = h.ncols();
    let mut gram = h.tr_mul(h);
    for i in 0..l {
        gram[(i, i)] += ridge;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::numerical("probability-model Gram matrix is not positive definite"))?;
    Ok(ProbModel {
        coeffs: chol.solve(&h.tr_mul(y)),
        ridge,
    })
}

/// Estimated `P_D(observed label | x)`, clamped to `[floor, 1 - floor]`.
pub fn estimate_observed_posteriors(
    model: &ProbModel,
    h: &DMatrix<f64>,
    y: &DMatrix<f64>,
    floor: f64,
) -> Result<DMatrix<f64>> {
    if h.ncols() != model.coeffs.nrows() {
        return Err(Error::shape("estimate_observed_posteriors", model.coeffs.nrows(), h.ncols()));
    }
    let scores = h * &model.coeffs;
    if scores.shape() != y.shape() {
        return Err(Error::shape(
            "estimate_observed_posteriors",
            format!("{:?}", scores.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    Ok(scores.zip_map(y, |s, obs| {
        let p_plus = sigmoid(s);
        let p = if obs > 0.0 { p_plus } else { 1.0 - p_plus };
        p.clamp(floor, 1.0 - floor)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, 99);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn map_is_deterministic_and_shaped() {
        let a = init_hidden_map(2, 20, 5).unwrap();
        assert_eq!(a, init_hidden_map(2, 20, 5).unwrap());
        assert_ne!(a, init_hidden_map(2, 20, 6).unwrap());
        let x = random(3, 2, 1);
        let h = a.map_features(&x).unwrap();
        assert_eq!(h.shape(), (3, 20));
        assert_eq!(h, a.map_features(&x).unwrap());
        assert!(a.map_features(&random(3, 4, 1)).is_err());
        assert!(a.weights().iter().all(|w| (-1.0..=1.0).contains(w)));
        assert!(a.biases().iter().all(|b| (0.0..=1.0).contains(b)));
    }

    #[test]
    fn minimal_map_and_sigmoid_midpoint() {
        let m = init_hidden_map(1, 1, 0).unwrap();
        assert_eq!(m.weights().shape(), (1, 1));
        let zero = HiddenMap::from_parts(DMatrix::from_element(1, 1, 0.7), DVector::zeros(1)).unwrap();
        assert_eq!(zero.map_features(&DMatrix::zeros(1, 1)).unwrap()[(0, 0)], 0.5);
    }

    #[test]
    fn sigmoid_stays_open_and_monotone() {
        assert!(sigmoid(800.0) < 1.0);
        assert!(sigmoid(-800.0) > 0.0);
        assert!(sigmoid(2.0 * 1.3) > sigmoid(1.3));
    }

    #[test]
    fn huge_ridge_shrinks_coefficients() {
        let h = random(30, 5, 2);
        let y = random(30, 3, 3).map(|v| v.signum());
        let m = fit_chunk_probability_model(&h, &y, 1e12).unwrap();
        assert!(m.coeffs.norm() < 1e-9);
    }

    #[test]
    fn tiny_ridge_interpolates_span() {
        let h = random(40, 6, 4);
        let c = random(6, 3, 5);
        let y = &h * &c;
        let m = fit_chunk_probability_model(&h, &y, 1e-8).unwrap();
        assert!((&h * &m.coeffs - &y).norm() < 1e-4);
    }

    #[test]
    fn normal_equations_hold() {
        let h = random(25, 8, 6);
        let y = random(25, 4, 7).map(|v| v.signum());
        let m = fit_chunk_probability_model(&h, &y, 1.0).unwrap();
        let mut lhs = h.tr_mul(&h);
        for i in 0..8 {
            lhs[(i, i)] += 1.0;
        }
        let rhs = h.tr_mul(&y);
        assert!((lhs * &m.coeffs - &rhs).norm() <= 1e-8 * rhs.norm());
    }

    #[test]
    fn constant_target_fits_near_one() {
        let h = DMatrix::from_element(50, 1, 1.0);
        let y = DMatrix::from_element(50, 1, 1.0);
        let m = fit_chunk_probability_model(&h, &y, 1e-6).unwrap();
        assert!(((&h * &m.coeffs)[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn posteriors_zero_score_and_clamp() {
        let model = ProbModel {
            coeffs: DMatrix::zeros(2, 2),
            ridge: 1.0,
        };
        let h = DMatrix::from_element(1, 2, 0.3);
        let y = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let p = estimate_observed_posteriors(&model, &h, &y, 0.05).unwrap();
        assert_eq!(p, DMatrix::from_element(1, 2, 0.5));

        let strong = ProbModel {
            coeffs: DMatrix::from_element(1, 1, (0.999f64 / 0.001).ln()),
            ridge: 1.0,
        };
        let h1 = DMatrix::from_element(1, 1, 1.0);
        let plus = estimate_observed_posteriors(&strong, &h1, &DMatrix::from_element(1, 1, 1.0), 0.05).unwrap();
        assert!((plus[(0, 0)] - 0.95).abs() < 1e-12);
        let raw_plus = estimate_observed_posteriors(&strong, &h1, &DMatrix::from_element(1, 1, 1.0), 0.0).unwrap();
        let raw_minus = estimate_observed_posteriors(&strong, &h1, &DMatrix::from_element(1, 1, -1.0), 0.0).unwrap();
        assert!((raw_plus[(0, 0)] + raw_minus[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardizer_uses_fit_statistics() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = Standardizer::fit(&x);
        let z = s.apply(&x).unwrap();
        assert!(z.column(0).sum().abs() < 1e-12);
        assert!(z.column(1).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn hidden_entries_in_open_unit_interval(seed in any::<u64>(), scale in 0.0f64..1e3) {
            let map = init_hidden_map(4, 7, seed).unwrap();
            let x = random(5, 4, seed) * scale;
            let h = map.map_features(&x).unwrap();
            prop_assert!(h.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn posteriors_respect_floor(seed in any::<u64>(), floor in 0.0f64..0.4) {
            let h = random(10, 3, seed);
            let y = random(10, 4, seed ^ 1).map(|v| if v > 0.0 { 1.0 } else { -1.0 });
            let m = fit_chunk_probability_model(&h, &y, 1.0).unwrap();
            let p = estimate_observed_posteriors(&m, &(h * 50.0), &y, floor).unwrap();
            prop_assert!(p.iter().all(|&v| v >= floor && v <= 1.0 - floor));
        }
    }
}
