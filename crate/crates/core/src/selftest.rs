//! Quick oracle checks runnable from the command line.

use nalgebra::DMatrix;
use rand::Rng;

use crate::data_stream::{rng_for, NoiseSpec};
use crate::drift_monitor::{estimate_cardinality, hoeffding_radius};
use crate::error::Result;
use crate::neighbor_graph::{build_scoring_kernel, knn_indices, solve_reconstruction_weights, KernelForm, QpOptions};
use crate::noise_weights::{
    build_ranking_matrix, clean_ranking_loss, compute_omega_unclamped, oracle_posteriors, unbiased_ranking_loss,
    OmegaMatrix,
};
use crate::online_model::{batch_gram, batch_solve, batch_solve_scoring_only, objective_gradient, objective_value, ChunkWorkspace, Hyper, ModelState};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, limit: f64) -> Check {
    Check {
        name,
        passed: value <= limit,
        detail: format!("{value:.3e} (limit {limit:.0e})"),
    }
}

fn random_workspace(index: usize, n: usize, l: usize, q: usize, hyper: &Hyper, seed: u64) -> Result<ChunkWorkspace> {
    let mut rng = rng_for(seed, 40 + index as u64);
    let x = DMatrix::from_fn(n, 5, |_, _| rng.random_range(-1.0..1.0));
    let h = DMatrix::from_fn(n, l, |_, _| rng.random_range(0.0..1.0));
    let y = DMatrix::from_fn(n, q, |_, _| if rng.random_bool(0.4) { 1.0 } else { -1.0 });
    let omega = OmegaMatrix {
        values: DMatrix::from_fn(n, q, |_, _| rng.random_range(0.5..1.5)),
        clamp_max: 10.0,
    };
    let graph = solve_reconstruction_weights(&x, &knn_indices(&x, 5)?, &QpOptions::default())?;
    let kernel = build_scoring_kernel(graph, hyper.beta, KernelForm::Derived)?;
    ChunkWorkspace::new(index, h, kernel, y, omega, hyper.gamma)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Enumerates every flip pattern of one instance; returns the worst absolute
/// gap between expected and clean values of (ranking loss, cardinality).
fn enumeration_gap(truth: &[f64], o: &[f64], spec: &NoiseSpec) -> Result<(f64, f64)> {
    let q = truth.len();
    let g = DMatrix::from_row_slice(1, q, truth);
    let om = DMatrix::from_row_slice(1, q, o);
    let (mut loss, mut card) = (0.0, 0.0);
    for mask in 0u32..(1 << q) {
        let mut p = 1.0;
        let y = DMatrix::from_fn(1, q, |_, j| {
            let flip = mask >> j & 1 == 1;
            let rate = if truth[j] > 0.0 { spec.rho_plus()[j] } else { spec.rho_minus()[j] };
            p *= if flip { rate } else { 1.0 - rate };
            if flip {
                -truth[j]
            } else {
                truth[j]
            }
        });
        let w = compute_omega_unclamped(&oracle_posteriors(&g, &y, spec)?, &y, spec)?;
        loss += p * unbiased_ranking_loss(&om, &y, &w)?;
        let omega = OmegaMatrix {
            values: w,
            clamp_max: f64::INFINITY,
        };
        card += p * estimate_cardinality(&omega, &y)?.mean;
    }
    let relevant = truth.iter().filter(|&&v| v > 0.0).count() as f64;
    Ok(((loss - clean_ranking_loss(&om, &g)?).abs(), (card - relevant).abs()))
}

pub fn run_selftest() -> Result<Vec<Check>> {
    let hyper = Hyper::new(1.0, 0.55, 2f64.powi(-6))?;
    let chunks = (0..3)
        .map(|i| random_workspace(i, 60, 10, 4, &hyper, 7))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ChunkWorkspace> = chunks.iter().collect();

    let mut state = ModelState::initialize(&chunks[0], hyper)?;
    for ws in &chunks[1..] {
        state.update(ws)?;
    }
    let batch = batch_solve(&refs, hyper.alpha)?;
    let k = batch_gram(&refs, hyper.alpha)?;
    let eye = DMatrix::<f64>::identity(k.nrows(), k.ncols());
    let psi = batch_solve_scoring_only(&refs, hyper.alpha)?;

    let ws = &chunks[0];
    let phi = DMatrix::from_fn(10, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin());
    let grad = objective_gradient(&phi, ws, &hyper);
    let step = 1e-5;
    let mut fd_err: f64 = 0.0;
    for (i, j) in [(0, 0), (3, 1), (9, 3), (5, 2)] {
        let mut up = phi.clone();
        up[(i, j)] += step;
        let mut down = phi.clone();
        down[(i, j)] -= step;
        let fd = (objective_value(&up, ws, &hyper) - objective_value(&down, ws, &hyper)) / (2.0 * step);
        fd_err = fd_err.max((fd - grad[(i, j)]).abs() / grad[(i, j)].abs().max(1.0));
    }

    let spec = NoiseSpec::new(vec![0.3, 0.25, 0.2, 0.35, 0.1], vec![0.2, 0.1, 0.3, 0.15, 0.05])?;
    let (loss_gap, card_gap) = enumeration_gap(&[1.0, -1.0, 1.0, 1.0, -1.0], &[0.9, -0.3, 0.2, 1.4, 0.0], &spec)?;

    let graph = &ws.kernel.graph;
    let feasible = graph.rows.iter().enumerate().all(|(t, row)| {
        let sum: f64 = row.iter().map(|&(_, w)| w).sum();
        row.len() <= graph.k && (sum - 1.0).abs() <= 1e-6 && row.iter().all(|&(m, w)| w >= 0.0 && m != t)
    });

    let a = build_ranking_matrix(&OmegaMatrix::ones(1, 2), &DMatrix::from_row_slice(1, 2, &[1.0, -1.0]))?;

    Ok(vec![
        check("sequential update equals batch solve", rel(&state.phi, &batch), 1e-6),
        check("inverse Gram times Gram is identity", (&state.p * &k - &eye).norm(), 1e-6),
        check("phi + z equals ranking-free solution", rel(&state.psi(), &psi), 1e-6),
        check("gradient matches finite differences", fd_err, 1e-5),
        check("unbiased ranking loss in expectation", loss_gap, 1e-10),
        check("unbiased cardinality in expectation", card_gap, 1e-10),
        check(
            "hoeffding radius at N=100, delta=0.1, range=2",
            (hoeffding_radius(2.0, 100, 0.1) - 0.24479).abs(),
            5e-5,
        ),
        Check {
            name: "reconstruction weights lie on the simplex",
            passed: feasible,
            detail: format!("{} rows", graph.rows.len()),
        },
        Check {
            name: "ranking matrix sign convention",
            passed: a.a[(0, 0)] < 0.0 && a.a[(0, 1)] > 0.0,
            detail: format!("A = ({}, {})", a.a[(0, 0)], a.a[(0, 1)]),
        },
    ])
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::run_selftest().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
