//! Local reconstruction graph over one chunk and the scoring kernel `R`
//! derived from it.
//!
//! Each instance is written as a convex combination of its `K` nearest
//! neighbours. With `Σ w = 1` the residual `x_t - Σ w_m x_m` equals
//! `Σ w_m (x_t - x_m)`, so every row is the small simplex-constrained
//! quadratic program `min wᵀ G w` with `G` the Gram matrix of the
//! neighbour differences. Rows are solved independently by projected
//! gradient descent.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_NEIGHBORS: usize = 10;

/// Indices of the `k` nearest rows of `x` (Euclidean), excluding the row
/// itself. Ties go to the lower index.
pub fn knn_indices(x: &DMatrix<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("neighbour count K={k} must satisfy 0 < K < N={n}")));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|t| x.row(t).iter().copied().collect()).collect();
    Ok((0..n)
        .into_par_iter()
        .map(|t| {
            let mut dist: Vec<(f64, usize)> = (0..n)
                .filter(|&m| m != t)
                .map(|m| {
                    let d2 = rows[t].iter().zip(&rows[m]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    (d2, m)
                })
                .collect();
            let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < dist.len() {
                dist.select_nth_unstable_by(k - 1, by_key);
                dist.truncate(k);
            }
            dist.sort_unstable_by(by_key);
            dist.into_iter().map(|(_, m)| m).collect()
        })
        .collect())
}

/// Euclidean projection onto `{w >= 0, Σ w = 1}` (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iters: usize,
    /// Stop once the relative objective decrease of a step falls below this.
    pub tol: f64,
    /// Keep the per-iteration objective values.
    pub record_trace: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            max_iters: 200,
            tol: 1e-8,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowFit {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start and after every accepted step, when recorded.
    pub trace: Vec<f64>,
}

fn quad_form(g: &DMatrix<f64>, w: &[f64]) -> f64 {
    let k = w.len();
    let mut acc = 0.0;
    for a in 0..k {
        let mut row = 0.0;
        for b in 0..k {
            row += g[(a, b)] * w[b];
        }
        acc += w[a] * row;
    }
    acc.max(0.0)
}

fn largest_eigenvalue(g: &DMatrix<f64>) -> f64 {
    let k = g.nrows();
    let mut v: Vec<f64> = (0..k).map(|i| 1.0 + 1e-3 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..50 {
        let next: Vec<f64> = (0..k).map(|a| (0..k).map(|b| g[(a, b)] * v[b]).sum()).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let estimate = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = next.into_iter().map(|x| x / norm).collect();
        if (estimate - lambda).abs() <= 1e-10 * estimate {
            return estimate;
        }
        lambda = estimate;
    }
    lambda
}

/// Minimizes `wᵀ G w` over the simplex, starting from uniform weights.
///
/// The step is `1/L` with `L = 2 λ_max(G)` from power iteration; a step that
/// would raise the objective is retried with a halved step, so the accepted
/// objective sequence never increases.
pub fn solve_simplex_qp(gram: &DMatrix<f64>, opts: &QpOptions) -> RowFit {
    let k = gram.nrows();
    let mut w = vec![1.0 / k as f64; k];
    let mut f = quad_form(gram, &w);
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(f);
    }
    let trace_g: f64 = (0..k).map(|i| gram[(i, i)]).sum();
    if trace_g <= f64::MIN_POSITIVE || f == 0.0 {
        return RowFit {
            weights: w,
            objective: f,
            iterations: 0,
            converged: true,
            trace,
        };
    }

    let mut step = 1.0 / (2.0 * largest_eigenvalue(gram).max(f64::MIN_POSITIVE));
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let grad: Vec<f64> = (0..k)
            .map(|a| 2.0 * (0..k).map(|b| gram[(a, b)] * w[b]).sum::<f64>())
            .collect();
        let (next, f_next) = loop {
            let moved: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
            let cand = project_to_simplex(&moved);
            let f_cand = quad_form(gram, &cand);
            if f_cand <= f || step < 1e-300 {
                break (cand, f_cand);
            }
            step *= 0.5;
        };
        let decrease = f - f_next;
        if f_next <= f {
            w = next;
            f = f_next;
            if opts.record_trace {
                trace.push(f);
            }
        }
        if f == 0.0 || decrease <= opts.tol * f.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    RowFit {
        weights: w,
        objective: f,
        iterations,
        converged,
        trace,
    }
}

/// Row-stochastic reconstruction weights with at most `K` entries per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphWeights {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n: usize,
    pub k: usize,
    /// Reconstruction error `‖x_t - Σ w x_m‖²` per row.
    pub objectives: Vec<f64>,
    /// Number of rows that hit the iteration cap before the tolerance.
    pub unconverged: usize,
    pub traces: Option<Vec<Vec<f64>>>,
}

impl GraphWeights {
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>, k: usize) -> Self {
        let n = rows.len();
        GraphWeights {
            objectives: vec![0.0; n],
            rows,
            n,
            k,
            unconverged: 0,
            traces: None,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n, self.n);
        for (t, row) in self.rows.iter().enumerate() {
            for &(m, w) in row {
                s[(t, m)] += w;
            }
        }
        s
    }

    /// `S · X`.
    pub fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for (t, row) in self.rows.iter().enumerate() {
            for &(m, w) in row {
                for c in 0..x.ncols() {
                    out[(t, c)] += w * x[(m, c)];
                }
            }
        }
        out
    }

    /// `Sᵀ · X`.
    pub fn tr_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for (t, row) in self.rows.iter().enumerate() {
            for &(m, w) in row {
                for c in 0..x.ncols() {
                    out[(m, c)] += w * x[(t, c)];
                }
            }
        }
        out
    }

    pub fn warned(&self) -> bool {
        self.unconverged > 0
    }
}

pub fn solve_reconstruction_weights(
    x: &DMatrix<f64>,
    neighbors: &[Vec<usize>],
    opts: &QpOptions,
) -> Result<GraphWeights> {
    let n = x.nrows();
    if neighbors.len() != n {
        return Err(Error::shape("solve_reconstruction_weights", n, neighbors.len()));
    }
    if neighbors.iter().flatten().any(|&m| m >= n) {
        return Err(Error::Config(format!("neighbour index out of range for N={n}")));
    }
    let k = neighbors.iter().map(Vec::len).max().unwrap_or(0);
    let fits: Vec<RowFit> = neighbors
        .par_iter()
        .enumerate()
        .map(|(t, nbrs)| {
            let diffs: Vec<Vec<f64>> = nbrs
                .iter()
                .map(|&m| x.row(t).iter().zip(x.row(m).iter()).map(|(a, b)| a - b).collect())
                .collect();
            let kk = nbrs.len();
            let gram = DMatrix::from_fn(kk, kk, |a, b| {
                diffs[a].iter().zip(&diffs[b]).map(|(u, v)| u * v).sum::<f64>()
            });
            solve_simplex_qp(&gram, opts)
        })
        .collect();

    let mut rows = Vec::with_capacity(n);
    let mut objectives = Vec::with_capacity(n);
    let mut traces = opts.record_trace.then(Vec::new);
    let mut unconverged = 0;
    for (nbrs, fit) in neighbors.iter().zip(fits) {
        rows.push(
            nbrs.iter()
                .zip(&fit.weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(&m, &w)| (m, w))
                .collect(),
        );
        objectives.push(fit.objective);
        unconverged += usize::from(!fit.converged);
        if let Some(t) = traces.as_mut() {
            t.push(fit.trace);
        }
    }
    Ok(GraphWeights {
        rows,
        n,
        k,
        objectives,
        unconverged,
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelForm {
    /// `βI + (1-β)(I-S)ᵀ(I-S)`, the Hessian of the scoring term.
    #[default]
    Derived,
    /// `βI + (1-β)(SᵀS - Sᵀ - S)`, missing the `(1-β)I` term; may be indefinite.
    Expanded,
}

/// The chunk's scoring kernel `R`, held in factored form through `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringKernel {
    pub graph: GraphWeights,
    pub beta: f64,
    pub form: KernelForm,
}

pub fn build_scoring_kernel(graph: GraphWeights, beta: f64, form: KernelForm) -> Result<ScoringKernel> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("beta={beta} must lie in (0, 1]")));
    }
    Ok(ScoringKernel { graph, beta, form })
}

impl ScoringKernel {
    pub fn n(&self) -> usize {
        self.graph.n
    }

    pub fn with_beta(&self, beta: f64) -> ScoringKernel {
        ScoringKernel {
            graph: self.graph.clone(),
            beta,
            form: self.form,
        }
    }

    /// `R · X` using the sparse rows of `S`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let b = self.beta;
        match self.form {
            KernelForm::Derived => {
                let resid = x - self.graph.mul(x);
                let back = &resid - self.graph.tr_mul(&resid);
                x * b + back * (1.0 - b)
            }
            KernelForm::Expanded => {
                let sx = self.graph.mul(x);
                let mixed = self.graph.tr_mul(&sx) - self.graph.tr_mul(x) - sx;
                x * b + mixed * (1.0 - b)
            }
        }
    }

    /// Dense `N x N` matrix, symmetric by construction.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let s = self.graph.to_dense();
        let id = DMatrix::<f64>::identity(n, n);
        let b = self.beta;
        let core = match self.form {
            KernelForm::Derived => {
                let d = &id - &s;
                d.transpose() * d
            }
            KernelForm::Expanded => s.transpose() * &s - s.transpose() - &s,
        };
        let mut r = id * b + core * (1.0 - b);
        for i in 0..n {
            for j in (i + 1)..n {
                r[(j, i)] = r[(i, j)];
            }
        }
        r
    }

    /// Ratio of the largest to the smallest absolute eigenvalue (dense).
    pub fn condition_number(&self) -> f64 {
        let eig = self.to_dense().symmetric_eigenvalues();
        let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_stream::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, 7);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Independent projection oracle: bisection on the shift θ.
    fn bisect_projection(v: &[f64]) -> Vec<f64> {
        let (mut lo, mut hi) = (
            v.iter().fold(f64::INFINITY, |a, &b| a.min(b)) - 1.0,
            v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
        );
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let mass: f64 = v.iter().map(|&x| (x - mid).max(0.0)).sum();
            if mass > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        v.iter().map(|&x| (x - 0.5 * (lo + hi)).max(0.0)).collect()
    }

    #[test]
    fn knn_one_dimensional() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 10.0]);
        assert_eq!(knn_indices(&x, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);
        assert_eq!(knn_indices(&x, 2).unwrap()[2], vec![1, 0]);
        assert!(knn_indices(&x, 3).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let x = DMatrix::from_column_slice(4, 1, &[5.0, 5.0, 5.0, 5.0]);
        assert_eq!(knn_indices(&x, 2).unwrap()[3], vec![0, 1]);
        assert_eq!(knn_indices(&x, 2).unwrap()[0], vec![1, 2]);
    }

    #[test]
    fn projection_examples() {
        let p = project_to_simplex(&[0.9, 0.6]);
        assert!((p[0] - 0.65).abs() < 1e-15 && (p[1] - 0.35).abs() < 1e-15);
        assert_eq!(project_to_simplex(&[-5.0, -5.0]), vec![0.5, 0.5]);
        assert_eq!(project_to_simplex(&[0.25, 0.75]), vec![0.25, 0.75]);
    }

    #[test]
    fn exact_neighbour_gets_full_weight() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, -1.0, 3.0]);
        assert!(solve_reconstruction_weights(&x, &[vec![1, 2, 3]], &QpOptions::default()).is_err());
        let nbrs = vec![vec![1, 2, 3], vec![0, 2, 3], vec![0, 1, 3], vec![0, 1, 2]];
        let g = solve_reconstruction_weights(&x, &nbrs, &QpOptions::default()).unwrap();
        assert!(g.objectives[0] < 1e-12);
        let w1: f64 = g.rows[0].iter().filter(|(m, _)| *m == 1).map(|(_, w)| w).sum();
        assert!((w1 - 1.0).abs() < 1e-6, "weight {w1}");
    }

    #[test]
    fn midpoint_splits_evenly() {
        let x = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 0.0, 0.0, 1.0, 2.0]);
        let nbrs = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        let g = solve_reconstruction_weights(&x, &nbrs, &QpOptions::default()).unwrap();
        let w: Vec<f64> = g.rows[0].iter().map(|p| p.1).collect();
        assert!((w[0] - 0.5).abs() < 1e-9 && (w[1] - 0.5).abs() < 1e-9);
        assert!(g.objectives[0] < 1e-20);
    }

    #[test]
    fn degenerate_rows_are_uniform() {
        let x = DMatrix::from_element(4, 2, 3.0);
        let nbrs = knn_indices(&x, 3).unwrap();
        let g = solve_reconstruction_weights(&x, &nbrs, &QpOptions::default()).unwrap();
        for row in &g.rows {
            assert!(row.iter().all(|&(_, w)| (w - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn beta_one_is_identity() {
        let x = random(6, 2, 3);
        let g = solve_reconstruction_weights(&x, &knn_indices(&x, 2).unwrap(), &QpOptions::default()).unwrap();
        let r = build_scoring_kernel(g, 1.0, KernelForm::Derived).unwrap();
        assert_eq!(r.to_dense(), DMatrix::identity(6, 6));
        assert!(build_scoring_kernel(r.graph.clone(), 0.0, KernelForm::Derived).is_err());
    }

    #[test]
    fn dense_forms_agree_with_sparse_apply() {
        let x = random(12, 3, 4);
        let g = solve_reconstruction_weights(&x, &knn_indices(&x, 3).unwrap(), &QpOptions::default()).unwrap();
        let probe = random(12, 5, 5);
        for form in [KernelForm::Derived, KernelForm::Expanded] {
            let r = build_scoring_kernel(g.clone(), 0.4, form).unwrap();
            assert!((r.to_dense() * &probe - r.apply(&probe)).norm() < 1e-12);
        }
    }

    #[test]
    fn three_point_kernel_matches_hand_formula() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        let g = solve_reconstruction_weights(&x, &knn_indices(&x, 2).unwrap(), &QpOptions::default()).unwrap();
        let s = g.to_dense();
        let r = build_scoring_kernel(g, 0.5, KernelForm::Derived).unwrap().to_dense();
        let id = DMatrix::<f64>::identity(3, 3);
        let expected = &id * 0.5 + (&id - &s).transpose() * (&id - &s) * 0.5;
        assert!((r - expected).abs().max() < 1e-12);
    }

    proptest! {
        #[test]
        fn projection_matches_bisection(v in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let p = project_to_simplex(&v);
            let oracle = bisect_projection(&v);
            prop_assert!(p.iter().all(|&w| w >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn rows_are_feasible_and_beat_uniform(seed in any::<u64>()) {
            let x = random(10, 3, seed);
            let nbrs = knn_indices(&x, 3).unwrap();
            let opts = QpOptions { record_trace: true, ..QpOptions::default() };
            let g = solve_reconstruction_weights(&x, &nbrs, &opts).unwrap();
            for (t, row) in g.rows.iter().enumerate() {
                prop_assert!(row.len() <= 3);
                prop_assert!(row.iter().all(|&(m, w)| w >= 0.0 && m != t && nbrs[t].contains(&m)));
                prop_assert!((row.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-6);
                let uniform: f64 = (0..x.ncols())
                    .map(|c| {
                        let rec: f64 = nbrs[t].iter().map(|&m| x[(m, c)]).sum::<f64>() / 3.0;
                        (x[(t, c)] - rec).powi(2)
                    })
                    .sum();
                prop_assert!(g.objectives[t] <= uniform + 1e-12);
                let trace = &g.traces.as_ref().unwrap()[t];
                prop_assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            }
        }

        #[test]
        fn derived_kernel_is_symmetric_and_bounded_below(seed in any::<u64>(), beta in 0.05f64..1.0) {
            let x = random(9, 2, seed);
            let g = solve_reconstruction_weights(&x, &knn_indices(&x, 3).unwrap(), &QpOptions::default()).unwrap();
            let r = build_scoring_kernel(g, beta, KernelForm::Derived).unwrap().to_dense();
            prop_assert_eq!(&r, &r.transpose());
            let min_eig = r.symmetric_eigenvalues().min();
            prop_assert!(min_eig >= beta - 1e-8);
        }
    }
}
