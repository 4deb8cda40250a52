//! Label-cardinality drift detection.
//!
//! Each chunk's noisy labels are reweighted into an unbiased estimate of the
//! ground-truth cardinality. A change between adjacent chunks larger than the
//! Hoeffding radius `ε = R·sqrt(ln(2/δ) / 2N)` is treated as drift.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_weights::OmegaMatrix;
use crate::online_model::{ChunkWorkspace, ModelState};

#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityEstimate {
    pub per_instance: Vec<f64>,
    pub mean: f64,
    /// `max - min` of `per_instance`.
    pub range: f64,
}

impl CardinalityEstimate {
    pub fn n(&self) -> usize {
        self.per_instance.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Retrain,
    Adjust,
    #[default]
    None,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrain" => Ok(Strategy::Retrain),
            "adjust" => Ok(Strategy::Adjust),
            "none" => Ok(Strategy::None),
            other => Err(Error::Config(format!("unknown strategy `{other}` (retrain|adjust|none)"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Retrain => "retrain",
            Strategy::Adjust => "adjust",
            Strategy::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftConfig {
    delta: f64,
    pub strategy: Strategy,
}

impl DriftConfig {
    pub fn new(delta: f64, strategy: Strategy) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta={delta} must lie strictly inside (0, 1)")));
        }
        Ok(DriftConfig { delta, strategy })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// One detection, as written to the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftEvent {
    pub chunk: usize,
    pub prev_mean: f64,
    pub new_mean: f64,
    pub epsilon: f64,
    pub strategy: Strategy,
}

/// `per_instance[t] = Σⱼ 1{Y=+1}·ω`.
pub fn estimate_cardinality(omega: &OmegaMatrix, y: &DMatrix<f64>) -> Result<CardinalityEstimate> {
    if omega.values.shape() != y.shape() {
        return Err(Error::shape("estimate_cardinality", format!("{:?}", y.shape()), format!("{:?}", omega.values.shape())));
    }
    let per_instance: Vec<f64> = (0..y.nrows())
        .map(|t| {
            (0..y.ncols())
                .filter(|&j| y[(t, j)] > 0.0)
                .map(|j| omega.values[(t, j)])
                .sum()
        })
        .collect();
    Ok(summarize(per_instance))
}

fn summarize(per_instance: Vec<f64>) -> CardinalityEstimate {
    let n = per_instance.len().max(1) as f64;
    let mean = per_instance.iter().sum::<f64>() / n;
    let (lo, hi) = per_instance
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = if per_instance.is_empty() { 0.0 } else { hi - lo };
    CardinalityEstimate {
        per_instance,
        mean,
        range,
    }
}

/// `ε = range · sqrt(ln(2/δ) / (2N))`.
pub fn hoeffding_threshold(card: &CardinalityEstimate, delta: f64) -> f64 {
    hoeffding_radius(card.range, card.n(), delta)
}

pub fn hoeffding_radius(range: f64, n: usize, delta: f64) -> f64 {
    range * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

pub fn detect(prev_mean: f64, card: &CardinalityEstimate, delta: f64) -> bool {
    (card.mean - prev_mean).abs() > hoeffding_threshold(card, delta)
}

pub fn adapt_retrain(state: &mut ModelState, ws: &ChunkWorkspace) -> Result<()> {
    state.adapt_retrain(ws)
}

pub fn adapt_adjust(state: &mut ModelState) {
    state.adapt_adjust()
}

/// Apply `strategy` after a detection at `ws`. Returns whether state changed.
pub fn adapt(state: &mut ModelState, ws: &ChunkWorkspace, strategy: Strategy) -> Result<bool> {
    match strategy {
        Strategy::Retrain => adapt_retrain(state, ws).map(|_| true),
        Strategy::Adjust => {
            adapt_adjust(state);
            Ok(true)
        }
        Strategy::None => Ok(false),
    }
}
