//! Online multi-label classification for label-noisy streams whose label
//! distribution can change.
//!
//! A stream arrives in equal-size chunks. The first chunk fits a closed-form
//! model on random nonlinear features; every later chunk is scored, then
//! absorbed with a recursive least-squares step. Noisy labels are reweighted
//! so that both the ranking term and a label-cardinality estimate are
//! unbiased, and a Hoeffding test on that estimate triggers adaptation.
//!
//! ```
//! use ncld_core::harness::{run_experiment, ExperimentConfig};
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.apply_text("synth_instances = 400\nchunk_size = 100\ntiming = false").unwrap();
//! let report = run_experiment(&cfg).unwrap();
//! assert_eq!(report.chunks.len(), 3);
//! ```

pub mod data_stream;
pub mod drift_monitor;
pub mod elm_features;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod neighbor_graph;
pub mod noise_weights;
pub mod online_model;
pub mod selftest;
pub mod synthetic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/streams.md")]
    mod streams {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/drift.md")]
    mod drift {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
