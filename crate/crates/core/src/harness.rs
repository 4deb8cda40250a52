//! Experiment configuration, the chunk loop, grid search and CSV reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data_stream::{
    chunk_in_order, chunk_stream, inject_noise, parse_dataset, sample_noise_spec, synthesize_drift, DataChunk, Dataset,
    DatasetFormat, DriftMode, NoiseSpec,
};
use crate::drift_monitor::{adapt, detect, estimate_cardinality, hoeffding_threshold, DriftConfig, DriftEvent, Strategy};
use crate::elm_features::{
    estimate_observed_posteriors, fit_chunk_probability_model, init_hidden_map, HiddenMap, Standardizer,
};
use crate::error::{Error, Result};
use crate::metrics::ChunkReport;
use crate::neighbor_graph::{build_scoring_kernel, knn_indices, solve_reconstruction_weights, KernelForm, QpOptions};
use crate::noise_weights::{compute_omega, oracle_posteriors, OmegaMatrix};
use crate::online_model::{predict, ChunkWorkspace, Hyper, InverseUpdate, ModelState};
use crate::synthetic::{generate, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorSource {
    /// Per-chunk ridge model on hidden features.
    Estimated,
    /// Exact posteriors from the ground truth and the flip rates.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingWeights {
    Unbiased,
    /// `ω ≡ 1`.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `None` runs on generated data described by `synthetic`.
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    pub synthetic: SyntheticSpec,
    pub chunk_size: usize,
    /// Keep only this many chunks (after shuffling).
    pub max_chunks: Option<usize>,
    pub hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub neighbors: usize,
    pub delta: f64,
    pub strategy: Strategy,
    pub noise_lo: f64,
    pub noise_hi: f64,
    pub inject_noise: bool,
    pub drift: Option<DriftMode>,
    pub drift_split: f64,
    pub seed_data: u64,
    pub seed_noise: u64,
    pub seed_model: u64,
    pub paper_literal_r: bool,
    pub posteriors: PosteriorSource,
    pub ranking_weights: RankingWeights,
    pub omega_max: f64,
    pub posterior_floor: f64,
    pub prob_ridge: f64,
    pub inner_solve: InverseUpdate,
    pub qp: QpOptions,
    pub repeats: usize,
    pub timing: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            format: DatasetFormat::SparseMultilabel,
            synthetic: SyntheticSpec::default(),
            chunk_size: 500,
            max_chunks: None,
            hidden: 20,
            alpha: 1.0,
            beta: 0.55,
            gamma: 2f64.powi(-6),
            neighbors: crate::neighbor_graph::DEFAULT_NEIGHBORS,
            delta: 0.1,
            strategy: Strategy::None,
            noise_lo: 0.2,
            noise_hi: 0.4,
            inject_noise: true,
            drift: None,
            drift_split: 0.5,
            seed_data: 0,
            seed_noise: 1,
            seed_model: 2,
            paper_literal_r: false,
            posteriors: PosteriorSource::Estimated,
            ranking_weights: RankingWeights::Unbiased,
            omega_max: crate::noise_weights::DEFAULT_OMEGA_MAX,
            posterior_floor: crate::elm_features::DEFAULT_POSTERIOR_FLOOR,
            prob_ridge: 1.0,
            inner_solve: InverseUpdate::LowRank,
            qp: QpOptions::default(),
            repeats: 1,
            timing: true,
            output: PathBuf::from("out"),
        }
    }
}

/// Recognized configuration keys, in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "format",
    "synth_instances",
    "synth_features",
    "synth_labels",
    "synth_min_cardinality",
    "synth_max_cardinality",
    "synth_center_scale",
    "synth_noise_sd",
    "chunk_size",
    "max_chunks",
    "hidden",
    "alpha",
    "beta",
    "gamma",
    "neighbors",
    "delta",
    "strategy",
    "noise_lo",
    "noise_hi",
    "inject_noise",
    "drift",
    "drift_split",
    "seed_data",
    "seed_noise",
    "seed_model",
    "paper_literal_r",
    "posteriors",
    "ranking_weights",
    "omega_max",
    "posterior_floor",
    "prob_ridge",
    "inner_solve",
    "qp_max_iters",
    "qp_tol",
    "repeats",
    "timing",
    "output",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// Accepts `0.015625`, `2^-6` and `2**-6`.
fn parse_real(key: &str, value: &str) -> Result<f64> {
    if let Some((base, exp)) = value.split_once("**").or_else(|| value.split_once('^')) {
        let base: f64 = parse(key, base.trim())?;
        let exp: i32 = parse(key, exp.trim())?;
        return Ok(base.powi(exp));
    }
    parse(key, value)
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "format" => self.format = v.parse()?,
            "synth_instances" => self.synthetic.instances = parse(key, v)?,
            "synth_features" => self.synthetic.features = parse(key, v)?,
            "synth_labels" => self.synthetic.labels = parse(key, v)?,
            "synth_min_cardinality" => self.synthetic.min_cardinality = parse(key, v)?,
            "synth_max_cardinality" => self.synthetic.max_cardinality = parse(key, v)?,
            "synth_center_scale" => self.synthetic.center_scale = parse_real(key, v)?,
            "synth_noise_sd" => self.synthetic.noise_sd = parse_real(key, v)?,
            "chunk_size" => self.chunk_size = parse(key, v)?,
            "max_chunks" => self.max_chunks = if v.is_empty() || v == "all" { None } else { Some(parse(key, v)?) },
            "hidden" => self.hidden = parse(key, v)?,
            "alpha" => self.alpha = parse_real(key, v)?,
            "beta" => self.beta = parse_real(key, v)?,
            "gamma" => self.gamma = parse_real(key, v)?,
            "neighbors" => self.neighbors = parse(key, v)?,
            "delta" => self.delta = parse_real(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "noise_lo" => self.noise_lo = parse_real(key, v)?,
            "noise_hi" => self.noise_hi = parse_real(key, v)?,
            "inject_noise" => self.inject_noise = parse_bool(key, v)?,
            "drift" => {
                self.drift = match v {
                    "none" | "" => None,
                    mode => Some(mode.parse()?),
                }
            }
            "drift_split" => self.drift_split = parse_real(key, v)?,
            "seed_data" => self.seed_data = parse(key, v)?,
            "seed_noise" => self.seed_noise = parse(key, v)?,
            "seed_model" => self.seed_model = parse(key, v)?,
            "paper_literal_r" => self.paper_literal_r = parse_bool(key, v)?,
            "posteriors" => {
                self.posteriors = match v {
                    "estimated" => PosteriorSource::Estimated,
                    "oracle" => PosteriorSource::Oracle,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `posteriors` (estimated|oracle)"))),
                }
            }
            "ranking_weights" => {
                self.ranking_weights = match v {
                    "unbiased" => RankingWeights::Unbiased,
                    "unit" => RankingWeights::Unit,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `ranking_weights` (unbiased|unit)"))),
                }
            }
            "omega_max" => self.omega_max = parse_real(key, v)?,
            "posterior_floor" => self.posterior_floor = parse_real(key, v)?,
            "prob_ridge" => self.prob_ridge = parse_real(key, v)?,
            "inner_solve" => {
                self.inner_solve = match v {
                    "lowrank" => InverseUpdate::LowRank,
                    "dense" => InverseUpdate::DenseFactor,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `inner_solve` (lowrank|dense)"))),
                }
            }
            "qp_max_iters" => self.qp.max_iters = parse(key, v)?,
            "qp_tol" => self.qp.tol = parse_real(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "timing" => self.timing = parse_bool(key, v)?,
            "output" => self.output = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected `key = value`, found `{}`", n + 1, raw.trim()))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// `NCLD_<KEY>` variables, for example `NCLD_BETA=0.6`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(key) = k.as_ref().strip_prefix("NCLD_") {
                self.set(&key.to_ascii_lowercase(), v.as_ref())?;
            }
        }
        Ok(())
    }

    /// Defaults, then the file, then the environment, then `overrides`.
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 || self.hidden == 0 || self.neighbors == 0 || self.repeats == 0 {
            return Err(Error::Config("chunk_size, hidden, neighbors and repeats must be positive".into()));
        }
        if self.max_chunks.is_some_and(|c| c < 2) {
            return Err(Error::Config("max_chunks must be at least 2".into()));
        }
        self.hyper()?;
        self.drift_config()?;
        if !(self.omega_max > 0.0) {
            return Err(Error::Config("omega_max must be positive".into()));
        }
        if !(self.posterior_floor > 0.0 && self.posterior_floor < 0.5) {
            return Err(Error::Config("posterior_floor must lie in (0, 0.5)".into()));
        }
        if !(self.prob_ridge > 0.0) {
            return Err(Error::Config("prob_ridge must be positive".into()));
        }
        if self.posteriors == PosteriorSource::Oracle && !self.inject_noise {
            return Err(Error::Config("oracle posteriors need injected noise over known ground truth".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> Result<Hyper> {
        Hyper::new(self.alpha, self.beta, self.gamma)
    }

    pub fn drift_config(&self) -> Result<DriftConfig> {
        DriftConfig::new(self.delta, self.strategy)
    }

    pub fn kernel_form(&self) -> KernelForm {
        if self.paper_literal_r {
            KernelForm::Expanded
        } else {
            KernelForm::Derived
        }
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "format" => match self.format {
                DatasetFormat::SparseMultilabel => "sparse".into(),
                DatasetFormat::DenseCsv => "csv".into(),
            },
            "synth_instances" => self.synthetic.instances.to_string(),
            "synth_features" => self.synthetic.features.to_string(),
            "synth_labels" => self.synthetic.labels.to_string(),
            "synth_min_cardinality" => self.synthetic.min_cardinality.to_string(),
            "synth_max_cardinality" => self.synthetic.max_cardinality.to_string(),
            "synth_center_scale" => self.synthetic.center_scale.to_string(),
            "synth_noise_sd" => self.synthetic.noise_sd.to_string(),
            "chunk_size" => self.chunk_size.to_string(),
            "max_chunks" => self.max_chunks.map(|c| c.to_string()).unwrap_or_else(|| "all".into()),
            "hidden" => self.hidden.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "neighbors" => self.neighbors.to_string(),
            "delta" => self.delta.to_string(),
            "strategy" => self.strategy.to_string(),
            "noise_lo" => self.noise_lo.to_string(),
            "noise_hi" => self.noise_hi.to_string(),
            "inject_noise" => self.inject_noise.to_string(),
            "drift" => match self.drift {
                None => "none".into(),
                Some(DriftMode::Growth) => "growth".into(),
                Some(DriftMode::Reduction) => "reduction".into(),
            },
            "drift_split" => self.drift_split.to_string(),
            "seed_data" => self.seed_data.to_string(),
            "seed_noise" => self.seed_noise.to_string(),
            "seed_model" => self.seed_model.to_string(),
            "paper_literal_r" => self.paper_literal_r.to_string(),
            "posteriors" => match self.posteriors {
                PosteriorSource::Estimated => "estimated".into(),
                PosteriorSource::Oracle => "oracle".into(),
            },
            "ranking_weights" => match self.ranking_weights {
                RankingWeights::Unbiased => "unbiased".into(),
                RankingWeights::Unit => "unit".into(),
            },
            "omega_max" => self.omega_max.to_string(),
            "posterior_floor" => self.posterior_floor.to_string(),
            "prob_ridge" => self.prob_ridge.to_string(),
            "inner_solve" => match self.inner_solve {
                InverseUpdate::LowRank => "lowrank".into(),
                InverseUpdate::DenseFactor => "dense".into(),
            },
            "qp_max_iters" => self.qp.max_iters.to_string(),
            "qp_tol" => self.qp.tol.to_string(),
            "repeats" => self.repeats.to_string(),
            "timing" => self.timing.to_string(),
            "output" => self.output.display().to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// The resolved configuration as a re-loadable `key = value` document.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// The configuration for repeat `r`: every seed shifted by `r`.
    pub fn for_repeat(&self, r: usize) -> ExperimentConfig {
        let r = r as u64;
        ExperimentConfig {
            seed_data: self.seed_data.wrapping_add(r),
            seed_noise: self.seed_noise.wrapping_add(r),
            seed_model: self.seed_model.wrapping_add(r),
            ..self.clone()
        }
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => parse_dataset(path, cfg.format),
        None => generate(&cfg.synthetic, cfg.seed_data),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub hamming_loss: f64,
    pub micro_f1: f64,
    pub average_precision: Option<f64>,
    pub gm: f64,
}

impl Summary {
    pub fn of(chunks: &[ChunkReport]) -> Summary {
        let n = chunks.len().max(1) as f64;
        let aps: Vec<f64> = chunks.iter().filter_map(|c| c.average_precision).collect();
        Summary {
            hamming_loss: chunks.iter().map(|c| c.hamming_loss).sum::<f64>() / n,
            micro_f1: chunks.iter().map(|c| c.micro_f1).sum::<f64>() / n,
            average_precision: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
            gm: chunks.iter().map(|c| c.gm).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub chunks: Vec<ChunkReport>,
    pub events: Vec<DriftEvent>,
    pub summary: Summary,
    pub config_echo: String,
    pub version: &'static str,
    pub evaluated_against_truth: bool,
    /// Instances left unchanged by drift synthesis.
    pub unlabeled_passthrough: usize,
    /// Graph rows whose QP hit the iteration cap.
    pub qp_unconverged: usize,
    /// Worst `R` conditioning seen (literal kernel form only).
    pub max_kernel_condition: Option<f64>,
    pub used_pseudo_inverse: bool,
    pub final_state: ModelState,
}

impl RunReport {
    /// Mean Hamming loss over chunks with `chunk_index >= from`.
    pub fn mean_hamming_loss_from(&self, from: usize) -> f64 {
        let tail: Vec<&ChunkReport> = self.chunks.iter().filter(|c| c.chunk_index >= from).collect();
        tail.iter().map(|c| c.hamming_loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Chunks with injected noise and the rates used, after shuffling, optional
/// truncation and optional drift synthesis.
pub fn prepare_stream(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Vec<DataChunk>, NoiseSpec, usize)> {
    let n = cfg.chunk_size;
    let mut chunks;
    let mut passthrough = 0;
    match cfg.drift {
        None => {
            chunks = chunk_stream(ds, n, cfg.seed_data)?;
            if let Some(max) = cfg.max_chunks {
                chunks.truncate(max);
            }
        }
        Some(mode) => {
            let full = ds.len() / n;
            let keep = cfg.max_chunks.map_or(full, |m| m.min(full));
            let shuffled = ds.permuted(cfg.seed_data).truncated(keep * n);
            let synth = synthesize_drift(&shuffled, mode, cfg.drift_split, cfg.seed_data)?;
            passthrough = synth.unlabeled_passthrough;
            chunks = chunk_in_order(&synth.dataset, n)?;
        }
    }
    let q = ds.n_labels();
    // Without injection the sampled rates are the assumed rates of the data.
    let spec = sample_noise_spec(q, cfg.noise_lo, cfg.noise_hi, cfg.seed_noise)?;
    if cfg.inject_noise {
        chunks = chunks
            .into_iter()
            .map(|c| inject_noise(&c.with_truth(), &spec, cfg.seed_noise))
            .collect::<Result<_>>()?;
    }
    Ok((chunks, spec, passthrough))
}

/// Per-run pieces shared by every chunk.
pub struct Pipeline<'a> {
    pub cfg: &'a ExperimentConfig,
    pub map: HiddenMap,
    pub standardizer: Standardizer,
    pub spec: NoiseSpec,
    pub hyper: Hyper,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a ExperimentConfig, first: &DataChunk, spec: NoiseSpec) -> Result<Self> {
        Ok(Pipeline {
            cfg,
            map: init_hidden_map(first.features.ncols(), cfg.hidden, cfg.seed_model)?,
            standardizer: Standardizer::fit(&first.features),
            spec,
            hyper: cfg.hyper()?,
        })
    }

    pub fn hidden(&self, chunk: &DataChunk) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let x = self.standardizer.apply(&chunk.features)?;
        let h = self.map.map_features(&x)?;
        Ok((x, h))
    }

    pub fn omega(&self, chunk: &DataChunk, h: &DMatrix<f64>) -> Result<OmegaMatrix> {
        let y = &chunk.observed_labels;
        if self.cfg.ranking_weights == RankingWeights::Unit {
            return Ok(OmegaMatrix::ones(y.nrows(), y.ncols()));
        }
        let posteriors = match self.cfg.posteriors {
            PosteriorSource::Estimated => {
                let model = fit_chunk_probability_model(h, y, self.cfg.prob_ridge)?;
                estimate_observed_posteriors(&model, h, y, self.cfg.posterior_floor)?
            }
            PosteriorSource::Oracle => {
                let truth = chunk
                    .truth_labels
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("chunk {} has no ground truth for oracle posteriors", chunk.index)))?;
                oracle_posteriors(truth, y, &self.spec)?
            }
        };
        compute_omega(&posteriors, y, &self.spec, self.cfg.omega_max)
    }

    pub fn workspace(&self, chunk: &DataChunk, x: &DMatrix<f64>, h: DMatrix<f64>) -> Result<(ChunkWorkspace, usize)> {
        let neighbors = knn_indices(x, self.cfg.neighbors)?;
        let graph = solve_reconstruction_weights(x, &neighbors, &self.cfg.qp)?;
        let unconverged = graph.unconverged;
        let kernel = build_scoring_kernel(graph, self.hyper.beta, self.cfg.kernel_form())?;
        let omega = self.omega(chunk, &h)?;
        let ws = ChunkWorkspace::new(chunk.index, h, kernel, chunk.observed_labels.clone(), omega, self.hyper.gamma)?;
        Ok((ws, unconverged))
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    run_on(cfg, &ds)
}

/// The chunk loop on an already-loaded dataset.
pub fn run_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    let drift = cfg.drift_config()?;
    let (chunks, spec, passthrough) = prepare_stream(cfg, ds)?;
    let against_truth = chunks.iter().all(|c| c.truth_labels.is_some());
    let pipe = Pipeline::new(cfg, &chunks[0], spec)?;

    let stage = |chunk: usize, name: &'static str| move |e: Error| e.at_stage(chunk, name);

    let first = &chunks[0];
    let (x0, h0) = pipe.hidden(first).map_err(stage(0, "map_features"))?;
    let (ws0, mut qp_unconverged) = pipe.workspace(first, &x0, h0).map_err(stage(0, "build_workspace"))?;
    let mut state = ModelState::initialize(&ws0, pipe.hyper)
        .map_err(stage(0, "initialize"))?
        .with_route(cfg.inner_solve);
    state.prev_cardinality = Some(
        estimate_cardinality(&ws0.omega, &ws0.y)
            .map_err(stage(0, "cardinality"))?
            .mean,
    );
    drop(ws0);

    let mut reports = Vec::with_capacity(chunks.len() - 1);
    let mut events = Vec::new();
    let mut max_condition: Option<f64> = None;
    let mut used_pseudo = false;

    for chunk in &chunks[1..] {
        let i = chunk.index;
        let started = Instant::now();
        let (x, h) = pipe.hidden(chunk).map_err(stage(i, "map_features"))?;
        let scores = state.score(&h).map_err(stage(i, "score"))?;
        let pred = predict(&scores).map_err(stage(i, "predict"))?;
        let truth = chunk.truth_labels.as_ref().unwrap_or(&chunk.observed_labels);
        let mut report = ChunkReport::evaluate(i, &scores, &pred, truth).map_err(stage(i, "evaluate"))?;

        let (ws, unconverged) = pipe.workspace(chunk, &x, h).map_err(stage(i, "build_workspace"))?;
        qp_unconverged += unconverged;
        let diag = state.update_inverse(&ws).map_err(stage(i, "update_inverse"))?;
        if let Some(c) = diag.kernel_condition {
            max_condition = Some(max_condition.map_or(c, |m: f64| m.max(c)));
        }
        used_pseudo |= diag.used_pseudo_inverse;

        let card = estimate_cardinality(&ws.omega, &ws.y).map_err(stage(i, "cardinality"))?;
        let eps = hoeffding_threshold(&card, drift.delta());
        let prev = state.prev_cardinality.unwrap_or(card.mean);
        if detect(prev, &card, drift.delta()) {
            report.drift_detected = true;
            adapt(&mut state, &ws, drift.strategy).map_err(stage(i, "adapt"))?;
            events.push(DriftEvent {
                chunk: i,
                prev_mean: prev,
                new_mean: card.mean,
                epsilon: eps,
                strategy: drift.strategy,
            });
        }
        state.update_coefficients(&ws);
        state.prev_cardinality = Some(card.mean);

        report.epsilon = eps;
        report.cardinality_mean = card.mean;
        report.wall_time = if cfg.timing { started.elapsed() } else { Duration::ZERO };
        reports.push(report);
    }

    Ok(RunReport {
        summary: Summary::of(&reports),
        chunks: reports,
        events,
        config_echo: cfg.echo(),
        version: env!("CARGO_PKG_VERSION"),
        evaluated_against_truth: against_truth,
        unlabeled_passthrough: passthrough,
        qp_unconverged,
        max_kernel_condition: max_condition,
        used_pseudo_inverse: used_pseudo,
        final_state: state,
    })
}

/// One run per repeat, each with its seeds shifted by the repeat index.
pub fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    (0..cfg.repeats)
        .map(|r| {
            let c = cfg.for_repeat(r);
            let ds = load_dataset(&c)?;
            run_on(&c, &ds)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub beta: f64,
    pub gamma: f64,
    pub mean_gm: f64,
    pub std_gm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Row-major over `beta_grid x gamma_grid`.
    pub points: Vec<GridPoint>,
    pub best: GridPoint,
}

/// `0.30, 0.35, ..., 0.80`.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=10).map(|i| (30 + 5 * i) as f64 / 100.0).collect()
}

/// `0, 2⁻⁸, ..., 2⁻³`.
pub fn default_gamma_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((3..=8).rev().map(|e| 2f64.powi(-e))).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Every grid point runs all repeats with the same seeds. Ties in mean GM go to
/// the earlier grid point.
pub fn grid_search(cfg: &ExperimentConfig, beta_grid: &[f64], gamma_grid: &[f64]) -> Result<GridResult> {
    if beta_grid.is_empty() || gamma_grid.is_empty() {
        return Err(Error::Config("grid search needs non-empty beta and gamma grids".into()));
    }
    cfg.validate()?;
    let datasets: Vec<Dataset> = (0..cfg.repeats)
        .map(|r| load_dataset(&cfg.for_repeat(r)))
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = beta_grid
        .iter()
        .flat_map(|&b| gamma_grid.iter().map(move |&g| (b, g)))
        .collect();
    let points: Vec<GridPoint> = pairs
        .par_iter()
        .map(|&(beta, gamma)| {
            let point = ExperimentConfig {
                beta,
                gamma,
                ..cfg.clone()
            };
            let gms = datasets
                .iter()
                .enumerate()
                .map(|(r, ds)| run_on(&point.for_repeat(r), ds).map(|rep| rep.summary.gm))
                .collect::<Result<Vec<f64>>>()?;
            let (mean_gm, std_gm) = mean_std(&gms);
            Ok(GridPoint {
                beta,
                gamma,
                mean_gm,
                std_gm,
            })
        })
        .collect::<Result<_>>()?;
    let best = *points
        .iter()
        .reduce(|best, p| if p.mean_gm > best.mean_gm { p } else { best })
        .expect("non-empty grid");
    Ok(GridResult { points, best })
}

/// 17 significant digits in scientific notation.
pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const CHUNKS_HEADER: &str =
    "chunk,hamming_loss,micro_f1,average_precision,gm,drift_detected,epsilon,cardinality_mean,wall_time_s,repeat";
pub const SUMMARY_HEADER: &str = "repeat,hamming_loss,micro_f1,average_precision,gm,detections,chunks";
pub const EVENTS_HEADER: &str = "chunk,prev_mean,new_mean,epsilon,strategy,repeat";
pub const GRID_HEADER: &str = "beta,gamma,mean_gm,std_gm";

fn csv_text(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `chunks.csv`, `summary.csv`, `events.csv` and `config.echo` for one
/// or more repeats. `summary.csv` ends with `mean` and `std` rows.
pub fn emit_reports(reports: &[RunReport], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let chunks = csv_text(
        CHUNKS_HEADER,
        reports.iter().enumerate().flat_map(|(r, rep)| {
            rep.chunks.iter().map(move |c| {
                vec![
                    c.chunk_index.to_string(),
                    fmt_real(c.hamming_loss),
                    fmt_real(c.micro_f1),
                    fmt_opt(c.average_precision),
                    fmt_real(c.gm),
                    (c.drift_detected as u8).to_string(),
                    fmt_real(c.epsilon),
                    fmt_real(c.cardinality_mean),
                    fmt_real(c.wall_time.as_secs_f64()),
                    r.to_string(),
                ]
            })
        }),
    );
    let events = csv_text(
        EVENTS_HEADER,
        reports.iter().enumerate().flat_map(|(r, rep)| {
            rep.events.iter().map(move |e| {
                vec![
                    e.chunk.to_string(),
                    fmt_real(e.prev_mean),
                    fmt_real(e.new_mean),
                    fmt_real(e.epsilon),
                    e.strategy.to_string(),
                    r.to_string(),
                ]
            })
        }),
    );
    let mut summary_rows: Vec<Vec<String>> = reports
        .iter()
        .enumerate()
        .map(|(r, rep)| {
            vec![
                r.to_string(),
                fmt_real(rep.summary.hamming_loss),
                fmt_real(rep.summary.micro_f1),
                fmt_opt(rep.summary.average_precision),
                fmt_real(rep.summary.gm),
                rep.events.len().to_string(),
                rep.chunks.len().to_string(),
            ]
        })
        .collect();
    let column = |f: fn(&Summary) -> Option<f64>| -> Option<(f64, f64)> {
        let vals: Vec<f64> = reports.iter().filter_map(|r| f(&r.summary)).collect();
        (!vals.is_empty()).then(|| mean_std(&vals))
    };
    let stats = [
        column(|s| Some(s.hamming_loss)),
        column(|s| Some(s.micro_f1)),
        column(|s| s.average_precision),
        column(|s| Some(s.gm)),
    ];
    let detections: Vec<f64> = reports.iter().map(|r| r.events.len() as f64).collect();
    let (det_mean, det_std) = mean_std(&detections);
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let mut row = vec![label.to_string()];
        row.extend(stats.iter().map(|s| fmt_opt(s.map(|(m, sd)| if pick == 0 { m } else { sd }))));
        row.push(fmt_real(if pick == 0 { det_mean } else { det_std }));
        row.push(reports.first().map(|r| r.chunks.len()).unwrap_or(0).to_string());
        summary_rows.push(row);
    }
    let summary = csv_text(SUMMARY_HEADER, summary_rows);

    let mut echo = String::new();
    if let Some(first) = reports.first() {
        let _ = writeln!(echo, "# ncld-core {}", first.version);
        let _ = writeln!(
            echo,
            "# evaluated against {}",
            if first.evaluated_against_truth { "ground truth" } else { "observed labels" }
        );
        let mut notes = BTreeMap::new();
        for rep in reports {
            *notes.entry("qp_unconverged_rows").or_insert(0usize) += rep.qp_unconverged;
            *notes.entry("drift_passthrough_instances").or_insert(0usize) += rep.unlabeled_passthrough;
            *notes.entry("pseudo_inverse_runs").or_insert(0usize) += rep.used_pseudo_inverse as usize;
        }
        for (k, v) in notes {
            let _ = writeln!(echo, "# {k}: {v}");
        }
        if let Some(c) = reports.iter().filter_map(|r| r.max_kernel_condition).reduce(f64::max) {
            let _ = writeln!(echo, "# max_kernel_condition: {}", fmt_real(c));
        }
        echo.push_str(&first.config_echo);
    }

    let mut written = Vec::new();
    for (name, body) in [
        ("chunks.csv", chunks),
        ("summary.csv", summary),
        ("events.csv", events),
        ("config.echo", echo),
    ] {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

pub fn emit_grid(grid: &GridResult, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let body = csv_text(
        GRID_HEADER,
        grid.points
            .iter()
            .map(|p| vec![fmt_real(p.beta), fmt_real(p.gamma), fmt_real(p.mean_gm), fmt_real(p.std_gm)]),
    );
    let path = dir.join("grid.csv");
    write_atomic(&path, body.as_bytes())?;
    Ok(path)
}
