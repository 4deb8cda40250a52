//! The online learner: closed-form initialization, prediction and the
//! recursive chunk update.
//!
//! For a chunk with hidden features `H`, scoring kernel `R` and target
//! `M = βY - γA`, the batch optimum over all chunks seen so far is
//!
//! ```text
//! Φ* = (αI + Σ HᵢᵀRᵢHᵢ)⁻¹ Σ HᵢᵀMᵢ
//! ```
//!
//! and the state carries `P = K⁻¹` so each new chunk costs a rank-`N`
//! correction instead of a fresh solve:
//!
//! ```text
//! P ← P - P Hᵀ (R⁻¹ + H P Hᵀ)⁻¹ H P
//! Φ ← Φ - P (HᵀRH Φ - HᵀM)
//! Z ← Z - P (HᵀRH Z - γ HᵀA)
//! ```
//!
//! `Z` tracks the difference between the ranking-free solution `Ψ` (target
//! `βY`) and `Φ`, so that `Φ + Z = Ψ` at every step.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::elm_features::Standardizer;
use crate::error::{Error, Result};
use crate::neighbor_graph::{KernelForm, ScoringKernel};
use crate::noise_weights::{build_ranking_matrix, build_target_matrix, OmegaMatrix, RankingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Hyper {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha={alpha} must be positive")));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Config(format!("beta={beta} must lie in (0, 1]")));
        }
        if !(gamma >= 0.0) {
            return Err(Error::Config(format!("gamma={gamma} must be non-negative")));
        }
        Ok(Hyper { alpha, beta, gamma })
    }
}

/// How the inverse-Gram update evaluates `(R⁻¹ + H P Hᵀ)⁻¹ H P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InverseUpdate {
    /// Push-through form `R H (I + P HᵀRH)⁻¹ P`: only `L x L` solves and
    /// sparse products with `S`.
    #[default]
    LowRank,
    /// Factor `R` and solve the `N x N` inner system directly.
    DenseFactor,
}

/// Everything the update needs from one chunk.
#[derive(Debug, Clone)]
pub struct ChunkWorkspace {
    pub index: usize,
    pub h: DMatrix<f64>,
    pub kernel: ScoringKernel,
    pub y: DMatrix<f64>,
    pub omega: OmegaMatrix,
    pub a: RankingMatrix,
    pub m: DMatrix<f64>,
    /// `Hᵀ R H`.
    pub gram: DMatrix<f64>,
    pub gamma: f64,
}

impl ChunkWorkspace {
    pub fn new(
        index: usize,
        h: DMatrix<f64>,
        kernel: ScoringKernel,
        y: DMatrix<f64>,
        omega: OmegaMatrix,
        gamma: f64,
    ) -> Result<Self> {
        if h.nrows() != kernel.n() || y.nrows() != h.nrows() {
            return Err(Error::shape("chunk workspace", h.nrows(), format!("{} / {}", kernel.n(), y.nrows())));
        }
        let a = build_ranking_matrix(&omega, &y)?;
        let m = build_target_matrix(&y, &a, kernel.beta, gamma)?;
        let gram = symmetrized(h.tr_mul(&kernel.apply(&h)));
        Ok(ChunkWorkspace {
            index,
            h,
            kernel,
            y,
            omega,
            a,
            m,
            gram,
            gamma,
        })
    }

    pub fn beta(&self) -> f64 {
        self.kernel.beta
    }
}

fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn with_ridge(gram: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let mut k = gram.clone();
    for i in 0..k.nrows() {
        k[(i, i)] += alpha;
    }
    k
}

/// Inverse of a symmetric matrix; SPD via Cholesky, otherwise (only when
/// `allow_pseudo`) an SVD pseudo-inverse.
fn symmetric_inverse(k: &DMatrix<f64>, allow_pseudo: bool) -> Result<(DMatrix<f64>, bool)> {
    if let Some(chol) = k.clone().cholesky() {
        return Ok((symmetrized(chol.inverse()), false));
    }
    if !allow_pseudo {
        return Err(Error::numerical("Gram matrix is not positive definite"));
    }
    let pinv = k
        .clone()
        .pseudo_inverse(1e-12 * k.norm().max(1.0))
        .map_err(|e| Error::numerical(format!("pseudo-inverse failed: {e}")))?;
    Ok((symmetrized(pinv), true))
}

/// Side information from one inverse-Gram update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateDiagnostics {
    /// Condition number of `R`, computed for the literal kernel form only.
    pub kernel_condition: Option<f64>,
    pub used_pseudo_inverse: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub phi: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub hyper: Hyper,
    pub chunks_seen: usize,
    /// Cardinality estimate of the last processed chunk.
    pub prev_cardinality: Option<f64>,
    pub route: InverseUpdate,
}

impl ModelState {
    /// Closed-form fit on the initialization chunk.
    pub fn initialize(ws: &ChunkWorkspace, hyper: Hyper) -> Result<Self> {
        check_hyper(ws, &hyper)?;
        let literal = ws.kernel.form == KernelForm::Expanded;
        let (p, _) = symmetric_inverse(&with_ridge(&ws.gram, hyper.alpha), literal)?;
        let phi = &p * ws.h.tr_mul(&ws.m);
        let z = &p * ws.h.tr_mul(&ws.a.a) * ws.gamma;
        Ok(ModelState {
            phi,
            p,
            z,
            hyper,
            chunks_seen: 1,
            prev_cardinality: None,
            route: InverseUpdate::default(),
        })
    }

    pub fn with_route(mut self, route: InverseUpdate) -> Self {
        self.route = route;
        self
    }

    pub fn n_hidden(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_labels(&self) -> usize {
        self.phi.ncols()
    }

    /// `O = H Φ`.
    pub fn score(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if h.ncols() != self.n_hidden() {
            return Err(Error::shape("score", self.n_hidden(), h.ncols()));
        }
        Ok(h * &self.phi)
    }

    /// Woodbury correction of `P` with the chunk's `HᵀRH`.
    pub fn update_inverse(&mut self, ws: &ChunkWorkspace) -> Result<UpdateDiagnostics> {
        check_hyper(ws, &self.hyper)?;
        let literal = ws.kernel.form == KernelForm::Expanded;
        let mut diag = UpdateDiagnostics {
            kernel_condition: literal.then(|| ws.kernel.condition_number()),
            used_pseudo_inverse: false,
        };
        let l = self.n_hidden();
        let correction = match self.route {
            InverseUpdate::LowRank => {
                let lhs = DMatrix::<f64>::identity(l, l) + &self.p * &ws.gram;
                let q = lhs
                    .lu()
                    .solve(&self.p)
                    .ok_or_else(|| Error::numerical("I + P·HᵀRH is singular"))?;
                &self.p * &ws.gram * q
            }
            InverseUpdate::DenseFactor => {
                let hp = &ws.h * &self.p;
                match ws.kernel.to_dense().cholesky() {
                    Some(chol) => {
                        // R⁻¹ + HPHᵀ = L⁻ᵀ (I + GPGᵀ) L⁻¹ with G = LᵀH.
                        let g = chol.l().transpose() * &ws.h;
                        let gp = &g * &self.p;
                        let n = g.nrows();
                        let inner = symmetrized(DMatrix::<f64>::identity(n, n) + &gp * g.transpose());
                        let inner = inner
                            .cholesky()
                            .ok_or_else(|| Error::numerical("inner Woodbury system is not positive definite"))?;
                        gp.transpose() * inner.solve(&gp)
                    }
                    None if literal => {
                        diag.used_pseudo_inverse = true;
                        let r = ws.kernel.to_dense();
                        let tol = 1e-12 * r.norm().max(1.0);
                        let r_pinv = r.pseudo_inverse(tol).map_err(|e| Error::numerical(e.to_string()))?;
                        let inner = r_pinv + &hp * ws.h.transpose();
                        let x = inner
                            .svd(true, true)
                            .solve(&hp, tol)
                            .map_err(|e| Error::numerical(e.to_string()))?;
                        hp.transpose() * x
                    }
                    None => return Err(Error::numerical("scoring kernel R is not positive definite")),
                }
            }
        };
        self.p = symmetrized(&self.p - correction);
        Ok(diag)
    }

    /// `Φ` and `Z` steps using the already-updated `P`.
    pub fn update_coefficients(&mut self, ws: &ChunkWorkspace) {
        let htm = ws.h.tr_mul(&ws.m);
        let hta = ws.h.tr_mul(&ws.a.a) * ws.gamma;
        self.phi -= &self.p * (&ws.gram * &self.phi - htm);
        self.z -= &self.p * (&ws.gram * &self.z - hta);
        self.chunks_seen += 1;
    }

    pub fn update(&mut self, ws: &ChunkWorkspace) -> Result<UpdateDiagnostics> {
        let diag = self.update_inverse(ws)?;
        self.update_coefficients(ws);
        Ok(diag)
    }

    /// Forget all history: `Φ = 0`, `Z = 0`, `P = (αI + HᵀRH)⁻¹` on this chunk.
    pub fn adapt_retrain(&mut self, ws: &ChunkWorkspace) -> Result<()> {
        let literal = ws.kernel.form == KernelForm::Expanded;
        let (p, _) = symmetric_inverse(&with_ridge(&ws.gram, self.hyper.alpha), literal)?;
        self.p = p;
        self.phi.fill(0.0);
        self.z.fill(0.0);
        Ok(())
    }

    /// Drop accumulated ranking information: `Φ ← Φ + Z`, `Z ← 0`.
    pub fn adapt_adjust(&mut self) {
        self.phi += &self.z;
        self.z.fill(0.0);
    }

    /// `Φ + Z`, the ranking-free solution.
    pub fn psi(&self) -> DMatrix<f64> {
        &self.phi + &self.z
    }
}

fn check_hyper(ws: &ChunkWorkspace, hyper: &Hyper) -> Result<()> {
    if (ws.beta() - hyper.beta).abs() > 0.0 || (ws.gamma - hyper.gamma).abs() > 0.0 {
        return Err(Error::State(format!(
            "chunk {} was built with (beta, gamma) = ({}, {}) but the model uses ({}, {})",
            ws.index,
            ws.beta(),
            ws.gamma,
            hyper.beta,
            hyper.gamma
        )));
    }
    Ok(())
}

/// `+1` where the score is strictly positive, `-1` otherwise.
pub fn predict(o: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if o.iter().any(|v| v.is_nan()) {
        return Err(Error::numerical("NaN label score"));
    }
    Ok(o.map(|v| if v > 0.0 { 1.0 } else { -1.0 }))
}

/// Dense `αI + Σ HᵢᵀRᵢHᵢ` built from each chunk's explicit `N x N` kernel.
pub fn batch_gram(chunks: &[&ChunkWorkspace], alpha: f64) -> Result<DMatrix<f64>> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::Config("batch solve needs at least one chunk".into()))?;
    let l = first.h.ncols();
    let mut k = DMatrix::<f64>::identity(l, l) * alpha;
    for ws in chunks {
        k += ws.h.transpose() * ws.kernel.to_dense() * &ws.h;
    }
    Ok(k)
}

/// Batch closed form with caller-chosen per-chunk targets.
pub fn batch_solve_targets(chunks: &[&ChunkWorkspace], targets: &[DMatrix<f64>], alpha: f64) -> Result<DMatrix<f64>> {
    if chunks.len() != targets.len() {
        return Err(Error::shape("batch_solve", chunks.len(), targets.len()));
    }
    let k = batch_gram(chunks, alpha)?;
    let mut rhs = DMatrix::zeros(k.nrows(), targets[0].ncols());
    for (ws, t) in chunks.iter().zip(targets) {
        rhs += ws.h.transpose() * t;
    }
    k.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("batch Gram matrix is singular"))
}

/// `Φ* = (αI + Σ HᵢᵀRᵢHᵢ)⁻¹ Σ HᵢᵀMᵢ` on the block-concatenated chunks.
pub fn batch_solve(chunks: &[&ChunkWorkspace], alpha: f64) -> Result<DMatrix<f64>> {
    let targets: Vec<DMatrix<f64>> = chunks.iter().map(|ws| ws.m.clone()).collect();
    batch_solve_targets(chunks, &targets, alpha)
}

/// Batch solution with the ranking term removed (`M = βY`).
pub fn batch_solve_scoring_only(chunks: &[&ChunkWorkspace], alpha: f64) -> Result<DMatrix<f64>> {
    let targets: Vec<DMatrix<f64>> = chunks.iter().map(|ws| &ws.y * ws.beta()).collect();
    batch_solve_targets(chunks, &targets, alpha)
}

/// `(β/2)‖HΦ-Y‖² + ((1-β)/2)‖(I-S)HΦ‖² + γ tr(AᵀHΦ) + (α/2)‖Φ‖²`.
pub fn objective_value(phi: &DMatrix<f64>, ws: &ChunkWorkspace, hyper: &Hyper) -> f64 {
    let o = &ws.h * phi;
    let fit = (&o - &ws.y).norm_squared();
    let recon = (&o - ws.kernel.graph.mul(&o)).norm_squared();
    let rank = ws.a.a.dot(&o);
    0.5 * hyper.beta * fit + 0.5 * (1.0 - hyper.beta) * recon + hyper.gamma * rank + 0.5 * hyper.alpha * phi.norm_squared()
}

/// `[αI + HᵀRH]Φ - Hᵀ(βY - γA)` with the derivation-consistent `R`.
pub fn objective_gradient(phi: &DMatrix<f64>, ws: &ChunkWorkspace, hyper: &Hyper) -> DMatrix<f64> {
    let kernel = ScoringKernel {
        graph: ws.kernel.graph.clone(),
        beta: hyper.beta,
        form: KernelForm::Derived,
    };
    let o = &ws.h * phi;
    let target = &ws.y * hyper.beta - &ws.a.a * hyper.gamma;
    ws.h.tr_mul(&kernel.apply(&o)) + phi * hyper.alpha - ws.h.tr_mul(&target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixDump {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixDump {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixDump {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }
}

impl MatrixDump {
    fn into_matrix(self, name: &str) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Parse {
                line: 0,
                message: format!("checkpoint matrix `{name}` has {} values for {}x{}", self.data.len(), self.rows, self.cols),
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Textual model checkpoint. Floats are written in shortest round-trip form,
/// so save followed by load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub hyper: Hyper,
    pub chunks_seen: usize,
    pub prev_cardinality: Option<f64>,
    pub hidden_seed: u64,
    pub n_inputs: usize,
    pub n_hidden: usize,
    pub standardizer: Standardizer,
    phi: MatrixDump,
    p: MatrixDump,
    z: MatrixDump,
}

impl Checkpoint {
    pub fn capture(state: &ModelState, hidden_seed: u64, n_inputs: usize, standardizer: &Standardizer) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            hyper: state.hyper,
            chunks_seen: state.chunks_seen,
            prev_cardinality: state.prev_cardinality,
            hidden_seed,
            n_inputs,
            n_hidden: state.n_hidden(),
            standardizer: standardizer.clone(),
            phi: (&state.phi).into(),
            p: (&state.p).into(),
            z: (&state.z).into(),
        }
    }

    pub fn restore(self) -> Result<ModelState> {
        Ok(ModelState {
            phi: self.phi.into_matrix("phi")?,
            p: self.p.into_matrix("p")?,
            z: self.z.into_matrix("z")?,
            hyper: self.hyper,
            chunks_seen: self.chunks_seen,
            prev_cardinality: self.prev_cardinality,
            route: InverseUpdate::default(),
        })
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        Ok(cp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::harness::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_stream::rng_for;
    use crate::neighbor_graph::{build_scoring_kernel, knn_indices, solve_reconstruction_weights, QpOptions};
    use rand::Rng;

    fn random(n: usize, m: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.random_range(lo..hi))
    }

    fn workspace(index: usize, n: usize, l: usize, q: usize, hyper: &Hyper, seed: u64) -> ChunkWorkspace {
        let mut rng = rng_for(seed, index as u64);
        let x = random(n, 3, -1.0, 1.0, &mut rng);
        let h = random(n, l, 0.0, 1.0, &mut rng);
        let y = random(n, q, -1.0, 1.0, &mut rng).map(|v| if v > 0.2 { 1.0 } else { -1.0 });
        let omega = OmegaMatrix {
            values: random(n, q, 0.2, 2.0, &mut rng),
            clamp_max: 10.0,
        };
        let g = solve_reconstruction_weights(&x, &knn_indices(&x, 4).unwrap(), &QpOptions::default()).unwrap();
        let kernel = build_scoring_kernel(g, hyper.beta, KernelForm::Derived).unwrap();
        ChunkWorkspace::new(index, h, kernel, y, omega, hyper.gamma).unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn zero_features_give_scaled_identity() {
        let hyper = Hyper::new(2.0, 0.5, 0.1).unwrap();
        let mut ws = workspace(0, 12, 4, 3, &hyper, 1);
        ws.h.fill(0.0);
        let ws = ChunkWorkspace::new(0, ws.h, ws.kernel, ws.y, ws.omega, hyper.gamma).unwrap();
        let state = ModelState::initialize(&ws, hyper).unwrap();
        assert!((&state.p - DMatrix::<f64>::identity(4, 4) * 0.5).norm() < 1e-15);
        assert_eq!(state.phi, DMatrix::zeros(4, 3));
    }

    #[test]
    fn initialization_solves_its_linear_system() {
        let hyper = Hyper::new(1.0, 0.55, 2f64.powi(-6)).unwrap();
        let ws = workspace(0, 30, 6, 4, &hyper, 2);
        let state = ModelState::initialize(&ws, hyper).unwrap();
        let k = with_ridge(&ws.gram, hyper.alpha);
        assert!((&k * &state.phi - ws.h.tr_mul(&ws.m)).norm() < 1e-8);
        let no_rank = Hyper { gamma: 0.0, ..hyper };
        let ws0 = ChunkWorkspace::new(0, ws.h.clone(), ws.kernel.clone(), ws.y.clone(), ws.omega.clone(), 0.0).unwrap();
        assert_eq!(ModelState::initialize(&ws0, no_rank).unwrap().z, DMatrix::zeros(6, 4));
    }

    #[test]
    fn mismatched_hyper_is_rejected() {
        let hyper = Hyper::new(1.0, 0.5, 0.1).unwrap();
        let ws = workspace(0, 10, 3, 2, &hyper, 3);
        assert!(matches!(
            ModelState::initialize(&ws, Hyper { gamma: 0.2, ..hyper }),
            Err(Error::State(_))
        ));
        assert!(Hyper::new(0.0, 0.5, 0.0).is_err());
        assert!(Hyper::new(1.0, 1.5, 0.0).is_err());
    }

    #[test]
    fn score_and_predict() {
        let hyper = Hyper::new(1.0, 0.5, 0.1).unwrap();
        let ws = workspace(0, 10, 3, 2, &hyper, 4);
        let mut state = ModelState::initialize(&ws, hyper).unwrap();
        let h1 = DMatrix::from_element(2, 3, 0.3);
        let h2 = DMatrix::from_element(2, 3, 0.1);
        let lhs = state.score(&(&h1 + &h2)).unwrap();
        let rhs = state.score(&h1).unwrap() + state.score(&h2).unwrap();
        assert!((lhs - rhs).norm() < 1e-12);
        assert!(state.score(&DMatrix::zeros(2, 4)).is_err());
        state.phi.fill(0.0);
        assert_eq!(predict(&state.score(&h1).unwrap()).unwrap(), DMatrix::from_element(2, 2, -1.0));
        let o = DMatrix::from_row_slice(1, 2, &[0.1, -0.1]);
        assert_eq!(predict(&o).unwrap(), DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
        assert!(predict(&DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn two_chunk_update_matches_batch_and_dense_inverse() {
        let hyper = Hyper::new(1.0, 0.55, 0.05).unwrap();
        let w0 = workspace(0, 40, 6, 3, &hyper, 5);
        let w1 = workspace(1, 40, 6, 3, &hyper, 5);
        for route in [InverseUpdate::LowRank, InverseUpdate::DenseFactor] {
            let mut state = ModelState::initialize(&w0, hyper).unwrap().with_route(route);
            state.update(&w1).unwrap();
            let batch = batch_solve(&[&w0, &w1], hyper.alpha).unwrap();
            assert!(rel(&state.phi, &batch) < 1e-6, "{route:?}");
            let k = batch_gram(&[&w0, &w1], hyper.alpha).unwrap();
            let inv = k.try_inverse().unwrap();
            assert!(rel(&state.p, &inv) < 1e-6);
            let psi = batch_solve_scoring_only(&[&w0, &w1], hyper.alpha).unwrap();
            assert!(rel(&state.psi(), &psi) < 1e-6);
        }
    }

    #[test]
    fn one_chunk_batch_is_initialization() {
        let hyper = Hyper::new(1.0, 0.7, 0.1).unwrap();
        let ws = workspace(0, 25, 5, 3, &hyper, 6);
        let state = ModelState::initialize(&ws, hyper).unwrap();
        assert!(rel(&state.phi, &batch_solve(&[&ws], 1.0).unwrap()) < 1e-10);
        assert!(batch_solve(&[&ws], 1e14).unwrap().norm() < 1e-9);
        assert!(batch_solve(&[], 1.0).is_err());
    }

    #[test]
    fn retrain_equals_fresh_initialization() {
        let hyper = Hyper::new(1.0, 0.55, 0.05).unwrap();
        let w0 = workspace(0, 30, 5, 3, &hyper, 7);
        let w1 = workspace(1, 30, 5, 3, &hyper, 7);
        let mut state = ModelState::initialize(&w0, hyper).unwrap();
        state.update_inverse(&w1).unwrap();
        state.adapt_retrain(&w1).unwrap();
        state.update_coefficients(&w1);
        let fresh = ModelState::initialize(&w1, hyper).unwrap();
        assert!(rel(&state.phi, &fresh.phi) < 1e-10);
        assert!(rel(&state.z, &fresh.z) < 1e-10);
    }

    #[test]
    fn adjust_exposes_psi_and_is_idempotent() {
        let hyper = Hyper::new(1.0, 0.55, 0.2).unwrap();
        let w0 = workspace(0, 30, 5, 3, &hyper, 8);
        let w1 = workspace(1, 30, 5, 3, &hyper, 8);
        let mut state = ModelState::initialize(&w0, hyper).unwrap();
        state.update(&w1).unwrap();
        state.adapt_adjust();
        let psi = batch_solve_scoring_only(&[&w0, &w1], 1.0).unwrap();
        assert!(rel(&state.phi, &psi) < 1e-6);
        let once = state.clone();
        state.adapt_adjust();
        assert_eq!(state, once);
    }

    #[test]
    fn objective_at_zero_without_ranking() {
        let hyper = Hyper::new(1.0, 0.4, 0.0).unwrap();
        let ws = workspace(0, 10, 3, 4, &hyper, 9);
        let v = objective_value(&DMatrix::zeros(3, 4), &ws, &hyper);
        assert!((v - 0.2 * 40.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_batch_optimum() {
        let hyper = Hyper::new(1.0, 0.55, 0.1).unwrap();
        let ws = workspace(0, 30, 5, 3, &hyper, 10);
        let phi = batch_solve(&[&ws], 1.0).unwrap();
        let g = objective_gradient(&phi, &ws, &hyper);
        assert!(g.norm() <= 1e-6 * ws.h.tr_mul(&ws.m).norm());
        let f0 = objective_value(&phi, &ws, &hyper);
        let mut rng = rng_for(10, 1);
        for _ in 0..5 {
            let bumped = &phi + random(5, 3, -0.1, 0.1, &mut rng);
            assert!(objective_value(&bumped, &ws, &hyper) >= f0);
        }
    }

    #[test]
    fn gradient_reduces_to_ridge_regression() {
        let hyper = Hyper::new(0.5, 1.0, 0.0).unwrap();
        let ws = workspace(0, 15, 4, 3, &hyper, 11);
        let phi = DMatrix::from_element(4, 3, 0.2);
        let ridge = ws.h.transpose() * (&ws.h * &phi - &ws.y) + &phi * 0.5;
        assert!((objective_gradient(&phi, &ws, &hyper) - ridge).norm() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let hyper = Hyper::new(1.0, 0.55, 2f64.powi(-6)).unwrap();
        let w0 = workspace(0, 20, 4, 3, &hyper, 12);
        let mut state = ModelState::initialize(&w0, hyper).unwrap();
        state.prev_cardinality = Some(1.0 / 3.0);
        let std = Standardizer::identity(3);
        let text = Checkpoint::capture(&state, 42, 3, &std).to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back.hidden_seed, 42);
        let restored = back.restore().unwrap();
        assert_eq!(restored, state);
        for (a, b) in restored.p.iter().zip(state.p.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(Checkpoint::from_text(&text.replace("\"version\": 1", "\"version\": 9")).is_err());
    }
}
