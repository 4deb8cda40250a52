//! Prequential multi-label metrics. Labels are bipolar, `+1` is relevant.

use std::time::Duration;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn same_shape(context: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, format!("{:?}", b.shape()), format!("{:?}", a.shape())));
    }
    Ok(())
}

/// Fraction of disagreeing instance-label pairs.
pub fn hamming_loss(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    same_shape("hamming_loss", pred, truth)?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let wrong = pred.iter().zip(truth.iter()).filter(|(p, t)| (**p > 0.0) != (**t > 0.0)).count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// `2TP / (2TP + FP + FN)` pooled over all pairs; 0 when nothing is positive.
pub fn micro_f1(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    same_shape("micro_f1", pred, truth)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p > 0.0, t > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 })
}

/// Ranking average precision. Ranks are by descending score with ties going
/// to the lower label index. Instances without relevant labels are skipped;
/// `None` if every instance is skipped.
pub fn average_precision(scores: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Option<f64>> {
    same_shape("average_precision", scores, truth)?;
    let q = truth.ncols();
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(q);
    for t in 0..truth.nrows() {
        order.clear();
        order.extend(0..q);
        order.sort_by(|&a, &b| scores[(t, b)].total_cmp(&scores[(t, a)]).then(a.cmp(&b)));
        let n_relevant = (0..q).filter(|&j| truth[(t, j)] > 0.0).count();
        if n_relevant == 0 {
            continue;
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (rank0, &j) in order.iter().enumerate() {
            if truth[(t, j)] > 0.0 {
                hits += 1;
                sum += hits as f64 / (rank0 + 1) as f64;
            }
        }
        total += sum / n_relevant as f64;
        counted += 1;
    }
    Ok((counted > 0).then(|| total / counted as f64))
}

/// `sqrt((1 - hl) · f1)`.
pub fn gm_score(hl: f64, f1: f64) -> f64 {
    ((1.0 - hl) * f1).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkReport {
    pub chunk_index: usize,
    pub hamming_loss: f64,
    pub micro_f1: f64,
    pub average_precision: Option<f64>,
    pub gm: f64,
    pub drift_detected: bool,
    pub epsilon: f64,
    pub cardinality_mean: f64,
    pub wall_time: Duration,
}

impl ChunkReport {
    /// Score a chunk's predictions. `epsilon`, `cardinality_mean` and
    /// `drift_detected` are filled in later in the loop.
    pub fn evaluate(chunk_index: usize, scores: &DMatrix<f64>, pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Self> {
        let hl = hamming_loss(pred, truth)?;
        let f1 = micro_f1(pred, truth)?;
        Ok(ChunkReport {
            chunk_index,
            hamming_loss: hl,
            micro_f1: f1,
            average_precision: average_precision(scores, truth)?,
            gm: gm_score(hl, f1),
            drift_detected: false,
            epsilon: 0.0,
            cardinality_mean: 0.0,
            wall_time: Duration::ZERO,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn hamming_examples() {
        let t = m(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(hamming_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(hamming_loss(&-&t, &t).unwrap(), 1.0);
        let p = m(2, 2, &[1.0, -1.0, -1.0, -1.0]);
        assert_eq!(hamming_loss(&p, &t).unwrap(), 0.25);
        assert!(hamming_loss(&m(1, 2, &[1.0, 1.0]), &t).is_err());
    }

    #[test]
    fn f1_examples() {
        let t = m(1, 3, &[1.0, -1.0, 1.0]);
        assert_eq!(micro_f1(&t, &t).unwrap(), 1.0);
        assert_eq!(micro_f1(&m(1, 3, &[-1.0; 3]), &t).unwrap(), 0.0);
        assert_eq!(micro_f1(&m(1, 3, &[-1.0; 3]), &m(1, 3, &[-1.0; 3])).unwrap(), 0.0);
        let p = m(1, 3, &[1.0, 1.0, -1.0]);
        assert_eq!(micro_f1(&p, &t).unwrap(), 0.5);
    }

    #[test]
    fn ap_examples() {
        let t = m(1, 3, &[-1.0, 1.0, -1.0]);
        assert_eq!(average_precision(&m(1, 3, &[0.5, 0.9, 0.1]), &t).unwrap(), Some(1.0));
        assert_eq!(average_precision(&m(1, 3, &[0.9, 0.5, 0.1]), &t).unwrap(), Some(0.5));
        let t4 = m(1, 4, &[1.0, -1.0, 1.0, -1.0]);
        let ap = average_precision(&m(1, 4, &[4.0, 3.0, 2.0, 1.0]), &t4).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&m(1, 2, &[0.0, 0.0]), &m(1, 2, &[-1.0, -1.0])).unwrap(), None);
        // Tie: label 0 ranks first.
        assert_eq!(average_precision(&m(1, 2, &[0.0, 0.0]), &m(1, 2, &[-1.0, 1.0])).unwrap(), Some(0.5));
    }

    #[test]
    fn gm_examples() {
        assert_eq!(gm_score(0.0, 1.0), 1.0);
        assert_eq!(gm_score(1.0, 0.7), 0.0);
        assert!((gm_score(0.1, 0.4) - 0.6).abs() < 1e-15);
    }

    fn bipolar(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(any::<bool>(), rows * cols)
            .prop_map(move |v| DMatrix::from_iterator(rows, cols, v.into_iter().map(|b| if b { 1.0 } else { -1.0 })))
    }

    proptest! {
        #[test]
        fn complement_and_permutation(pred in bipolar(5, 4), truth in bipolar(5, 4), scores in proptest::collection::vec(-5.0f64..5.0, 20)) {
            let hl = hamming_loss(&pred, &truth).unwrap();
            prop_assert!((hl + hamming_loss(&-&pred, &truth).unwrap() - 1.0).abs() < 1e-12);
            let s = DMatrix::from_vec(5, 4, scores);
            let perm = [2usize, 0, 3, 1];
            let pc = pred.select_columns(&perm);
            let tc = truth.select_columns(&perm);
            let sc = s.select_columns(&perm);
            prop_assert_eq!(hl, hamming_loss(&pc, &tc).unwrap());
            prop_assert_eq!(micro_f1(&pred, &truth).unwrap(), micro_f1(&pc, &tc).unwrap());
            let a = average_precision(&s, &truth).unwrap();
            let b = average_precision(&sc, &tc).unwrap();
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
            let mono = s.map(|v| (v * 0.5).exp() + 3.0);
            prop_assert_eq!(average_precision(&mono, &truth).unwrap(), a);
            if let Some(a) = a {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
