//! Dataset ingestion, chunking, label-noise injection and synthetic
//! concept-drift construction.
//!
//! Labels are stored as `f64` matrices with entries in `{-1, +1}` so that the
//! solver can use them directly as regression targets.
//!
//! Two on-disk formats are understood:
//!
//! * **sparse multi-label**: a required header line `#q=<q> d=<d>`, then one
//!   instance per line as `lbl[,lbl...] idx:val [idx:val...]`. Label indices
//!   are 0-based, feature indices 1-based. An instance without relevant labels
//!   starts directly with its first `idx:val` pair (or is an empty line of
//!   features after a leading space).
//! * **dense CSV**: a header `f1,...,fd,l1,...,lq` followed by numeric rows;
//!   label columns hold `0`/`1` and are mapped to `-1`/`+1`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded generator for an independent sub-stream of `seed`.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    SparseMultilabel,
    DenseCsv,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" | "sparse-multilabel" => Ok(DatasetFormat::SparseMultilabel),
            "csv" | "dense-csv" => Ok(DatasetFormat::DenseCsv),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// A fully labelled multi-label dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: DMatrix<f64>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: DMatrix<f64>, name: impl Into<String>) -> Result<Self> {
        if features.nrows() != labels.nrows() {
            return Err(Error::shape("dataset", features.nrows(), labels.nrows()));
        }
        if features.nrows() == 0 {
            return Err(Error::Config("dataset has no instances".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::Config("dataset has no features".into()));
        }
        if labels.ncols() < 2 {
            return Err(Error::Config(format!(
                "multi-label dataset needs q >= 2 labels, got {}",
                labels.ncols()
            )));
        }
        check_bipolar(&labels, "dataset labels")?;
        Ok(Dataset {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.ncols()
    }

    /// Mean number of relevant labels per instance.
    pub fn label_cardinality(&self) -> f64 {
        label_cardinality(&self.labels)
    }

    /// Rows reordered by a seeded permutation.
    pub fn permuted(&self, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_for(seed, 0));
        self.select_rows(&order)
    }

    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            features: self.features.rows(0, n).into_owned(),
            labels: self.labels.rows(0, n).into_owned(),
            name: self.name.clone(),
        }
    }

    fn select_rows(&self, order: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(order),
            labels: self.labels.select_rows(order),
            name: self.name.clone(),
        }
    }
}

pub(crate) fn label_cardinality(labels: &DMatrix<f64>) -> f64 {
    let relevant = labels.iter().filter(|&&v| v > 0.0).count();
    relevant as f64 / labels.nrows().max(1) as f64
}

pub(crate) fn check_bipolar(labels: &DMatrix<f64>, context: &str) -> Result<()> {
    if labels.iter().all(|&v| v == 1.0 || v == -1.0) {
        Ok(())
    } else {
        Err(Error::State(format!("{context}: entries must be -1 or +1")))
    }
}

/// One batch of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DataChunk {
    pub features: DMatrix<f64>,
    pub observed_labels: DMatrix<f64>,
    pub truth_labels: Option<DMatrix<f64>>,
    pub index: usize,
}

impl DataChunk {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Declares the current observed labels to be the clean ground truth.
    pub fn with_truth(mut self) -> Self {
        self.truth_labels = Some(self.observed_labels.clone());
        self
    }
}

/// Per-label flip rates: `rho_plus[j]` is the chance a relevant label is
/// observed as irrelevant, `rho_minus[j]` the reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    rho_plus: Vec<f64>,
    rho_minus: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(rho_plus: Vec<f64>, rho_minus: Vec<f64>) -> Result<Self> {
        if rho_plus.len() != rho_minus.len() {
            return Err(Error::shape("noise spec", rho_plus.len(), rho_minus.len()));
        }
        for (j, (&p, &m)) in rho_plus.iter().zip(&rho_minus).enumerate() {
            let in_range = |r: f64| (0.0..1.0).contains(&r);
            if !in_range(p) || !in_range(m) || p + m >= 1.0 {
                return Err(Error::Config(format!(
                    "label {j}: flip rates ({p}, {m}) must lie in [0,1) with sum < 1"
                )));
            }
        }
        Ok(NoiseSpec { rho_plus, rho_minus })
    }

    pub fn zeros(q: usize) -> Self {
        NoiseSpec {
            rho_plus: vec![0.0; q],
            rho_minus: vec![0.0; q],
        }
    }

    pub fn uniform(q: usize, rho_plus: f64, rho_minus: f64) -> Result<Self> {
        NoiseSpec::new(vec![rho_plus; q], vec![rho_minus; q])
    }

    pub fn n_labels(&self) -> usize {
        self.rho_plus.len()
    }

    pub fn rho_plus(&self) -> &[f64] {
        &self.rho_plus
    }

    pub fn rho_minus(&self) -> &[f64] {
        &self.rho_minus
    }

    pub fn is_clean(&self) -> bool {
        self.rho_plus.iter().chain(&self.rho_minus).all(|&r| r == 0.0)
    }
}

pub fn parse_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let reader = BufReader::new(file);
    match format {
        DatasetFormat::SparseMultilabel => read_sparse(reader, name),
        DatasetFormat::DenseCsv => read_dense(reader, name),
    }
}

fn parse_header(line: &str, lineno: usize) -> Result<(usize, usize)> {
    let bad = || Error::Parse {
        line: lineno,
        message: format!("expected header `#q=<q> d=<d>`, found `{line}`"),
    };
    let body = line.strip_prefix('#').ok_or_else(bad)?;
    let (mut q, mut d) = (None, None);
    for tok in body.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(bad)?;
        let v: usize = v.parse().map_err(|_| bad())?;
        match k {
            "q" => q = Some(v),
            "d" => d = Some(v),
            _ => return Err(bad()),
        }
    }
    match (q, d) {
        (Some(q), Some(d)) => Ok((q, d)),
        _ => Err(bad()),
    }
}

pub fn read_sparse(reader: impl BufRead, name: impl Into<String>) -> Result<Dataset> {
    let mut header = None;
    let mut feature_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut label_rows: Vec<Vec<usize>> = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let Some((q, d)) = header else {
            if line.trim().is_empty() {
                continue;
            }
            header = Some(parse_header(line.trim(), lineno)?);
            continue;
        };
        if line.trim().is_empty() {
            continue;
        }

        let mut tokens = line.split_whitespace().peekable();
        let mut labels = Vec::new();
        if let Some(first) = tokens.peek() {
            if !first.contains(':') {
                for lbl in first.split(',').filter(|s| !s.is_empty()) {
                    let j: usize = lbl.parse().map_err(|_| Error::Parse {
                        line: lineno,
                        message: format!("bad label index `{lbl}`"),
                    })?;
                    if j >= q {
                        return Err(Error::Range {
                            line: lineno,
                            what: "label",
                            index: j,
                            limit: q,
                        });
                    }
                    labels.push(j);
                }
                tokens.next();
            }
        }
        let mut feats = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("expected `idx:val`, found `{tok}`"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad feature index `{idx}`"),
            })?;
            let val: f64 = val.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad feature value `{val}`"),
            })?;
            if idx == 0 || idx > d {
                return Err(Error::Range {
                    line: lineno,
                    what: "feature",
                    index: idx,
                    limit: d,
                });
            }
            feats.push((idx - 1, val));
        }
        feature_rows.push(feats);
        label_rows.push(labels);
    }

    let Some((q, d)) = header else {
        return Err(Error::Parse {
            line: 0,
            message: "empty input: missing `#q=<q> d=<d>` header".into(),
        });
    };
    if feature_rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no instances after header".into(),
        });
    }
    let n = feature_rows.len();
    let mut features = DMatrix::zeros(n, d);
    let mut labels = DMatrix::from_element(n, q, -1.0);
    for (t, (feats, lbls)) in feature_rows.iter().zip(&label_rows).enumerate() {
        for &(k, v) in feats {
            features[(t, k)] = v;
        }
        for &j in lbls {
            labels[(t, j)] = 1.0;
        }
    }
    Dataset::new(features, labels, name)
}

pub fn read_dense(reader: impl std::io::Read, name: impl Into<String>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "empty input: missing header".into(),
        });
    }
    let d = headers.iter().take_while(|h| h.trim().starts_with('f')).count();
    let q = headers.len() - d;
    if !headers.iter().skip(d).all(|h| h.trim().starts_with('l')) {
        return Err(Error::Parse {
            line: 1,
            message: "header must be f1..fd followed by l1..lq".into(),
        });
    }

    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let lineno = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if record.len() != d + q {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} columns, found {}", d + q, record.len()),
            });
        }
        for field in record.iter().take(d) {
            feats.push(field.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad feature value `{field}`"),
            })?);
        }
        for field in record.iter().skip(d) {
            labels.push(match field.trim() {
                "1" => 1.0,
                "0" => -1.0,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("label must be 0 or 1, found `{other}`"),
                    })
                }
            });
        }
    }
    let n = feats.len() / d.max(1);
    if n == 0 {
        return Err(Error::Parse {
            line: 2,
            message: "no instances after header".into(),
        });
    }
    let features = DMatrix::from_row_slice(n, d, &feats);
    let labels = DMatrix::from_row_slice(n, q, &labels);
    Dataset::new(features, labels, name)
}

pub fn write_sparse(ds: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "#q={} d={}", ds.n_labels(), ds.n_features())?;
    for t in 0..ds.len() {
        let labels: Vec<String> = (0..ds.n_labels())
            .filter(|&j| ds.labels[(t, j)] > 0.0)
            .map(|j| j.to_string())
            .collect();
        let mut line = labels.join(",");
        for k in 0..ds.n_features() {
            let v = ds.features[(t, k)];
            if v != 0.0 {
                if !line.is_empty() {
                    line.push(' ');
                }
                line.push_str(&format!("{}:{}", k + 1, v));
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_dense(ds: &Dataset, out: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (1..=ds.n_features())
        .map(|k| format!("f{k}"))
        .chain((1..=ds.n_labels()).map(|j| format!("l{j}")))
        .collect();
    w.write_record(&header)?;
    for t in 0..ds.len() {
        let row: Vec<String> = ds
            .features
            .row(t)
            .iter()
            .map(|v| v.to_string())
            .chain(ds.labels.row(t).iter().map(|&v| if v > 0.0 { "1" } else { "0" }.to_string()))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()
}

/// Seeded shuffle, then equal-size chunks; chunk 0 initializes the model.
pub fn chunk_stream(ds: &Dataset, chunk_size: usize, seed: u64) -> Result<Vec<DataChunk>> {
    check_chunking(ds, chunk_size)?;
    chunk_in_order(&ds.permuted(seed), chunk_size)
}

/// Chunks without shuffling, so that any ordering in `ds` (such as a drift
/// split) lands at chunk boundaries.
pub fn chunk_in_order(ds: &Dataset, chunk_size: usize) -> Result<Vec<DataChunk>> {
    check_chunking(ds, chunk_size)?;
    let n_chunks = ds.len() / chunk_size;
    Ok((0..n_chunks)
        .map(|i| DataChunk {
            features: ds.features.rows(i * chunk_size, chunk_size).into_owned(),
            observed_labels: ds.labels.rows(i * chunk_size, chunk_size).into_owned(),
            truth_labels: None,
            index: i,
        })
        .collect())
}

fn check_chunking(ds: &Dataset, chunk_size: usize) -> Result<()> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    if ds.len() < 2 * chunk_size {
        return Err(Error::Config(format!(
            "{} instances cannot fill an initialization chunk and one stream chunk of size {chunk_size}",
            ds.len()
        )));
    }
    Ok(())
}

pub fn sample_noise_spec(q: usize, lo: f64, hi: f64, seed: u64) -> Result<NoiseSpec> {
    if !(lo >= 0.0 && lo <= hi) {
        return Err(Error::Config(format!("noise range [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
    }
    if hi + hi >= 1.0 {
        return Err(Error::Config(format!(
            "noise upper bound {hi} allows rho_plus + rho_minus >= 1"
        )));
    }
    let mut rng = rng_for(seed, 1);
    let mut draw = || rng.random_range(lo..=hi);
    let rho_plus: Vec<f64> = (0..q).map(|_| draw()).collect();
    let rho_minus: Vec<f64> = (0..q).map(|_| draw()).collect();
    NoiseSpec::new(rho_plus, rho_minus)
}

/// Flips each ground-truth entry independently at its label's rate.
pub fn inject_noise(chunk: &DataChunk, spec: &NoiseSpec, seed: u64) -> Result<DataChunk> {
    let truth = chunk
        .truth_labels
        .as_ref()
        .ok_or_else(|| Error::State(format!("chunk {} has no ground-truth labels", chunk.index)))?;
    if truth.ncols() != spec.n_labels() {
        return Err(Error::shape("inject_noise", spec.n_labels(), truth.ncols()));
    }
    let mut rng = rng_for(seed, 2 + chunk.index as u64);
    let mut observed = truth.clone();
    // Row-major draw order keeps results independent of matrix layout.
    for t in 0..truth.nrows() {
        for j in 0..truth.ncols() {
            let rate = if truth[(t, j)] > 0.0 {
                spec.rho_plus[j]
            } else {
                spec.rho_minus[j]
            };
            let u: f64 = rng.random();
            if u < rate {
                observed[(t, j)] = -truth[(t, j)];
            }
        }
    }
    Ok(DataChunk {
        features: chunk.features.clone(),
        observed_labels: observed,
        truth_labels: Some(truth.clone()),
        index: chunk.index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftMode {
    Growth,
    Reduction,
}

impl FromStr for DriftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "growth" => Ok(DriftMode::Growth),
            "reduction" => Ok(DriftMode::Reduction),
            other => Err(Error::Config(format!("unknown drift mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSynthesis {
    pub dataset: Dataset,
    /// First instance of the second regime.
    pub split_index: usize,
    /// Instances in the single-label regime that had no relevant label.
    pub unlabeled_passthrough: usize,
}

/// Growth: instances before the split keep one relevant label chosen
/// uniformly at random; reduction does the same after the split.
pub fn synthesize_drift(ds: &Dataset, mode: DriftMode, split: f64, seed: u64) -> Result<DriftSynthesis> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Config(format!("drift split {split} must lie in (0, 1)")));
    }
    let split_index = (split * ds.len() as f64).round() as usize;
    let single = match mode {
        DriftMode::Growth => 0..split_index,
        DriftMode::Reduction => split_index..ds.len(),
    };
    let mut rng = rng_for(seed, 3);
    let mut labels = ds.labels.clone();
    let mut passthrough = 0;
    for t in single {
        let relevant: Vec<usize> = (0..ds.n_labels()).filter(|&j| labels[(t, j)] > 0.0).collect();
        let Some(&keep) = relevant.choose(&mut rng) else {
            passthrough += 1;
            continue;
        };
        for j in relevant {
            if j != keep {
                labels[(t, j)] = -1.0;
            }
        }
    }
    Ok(DriftSynthesis {
        dataset: Dataset {
            features: ds.features.clone(),
            labels,
            name: ds.name.clone(),
        },
        split_index,
        unlabeled_passthrough: passthrough,
    })
}
