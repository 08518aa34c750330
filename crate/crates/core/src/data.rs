//! Datasets of positive and unlabelled samples, file ingestion, train/validation
//! splitting and SCAR synthetic data.
//!
//! File layouts:
//!
//! * CSV with a header row: `id,label[,truth][,group],f0,...,f{d-1}`. `label`
//!   is the labelled indicator `s`. `truth` (hidden class `y`) and `group`
//!   (event/speech identifier used by leave-one-group-out folds) are optional
//!   columns; an empty `truth` cell means "unknown" for that row.
//! * JSONL, one object per line:
//!   `{"id":0,"label":1,"truth":1,"group":3,"features":[0.5,-1.25]}` with
//!   `truth` and `group` optional.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PuError, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    /// The observed indicator `s`: true when the sample carries a positive label.
    pub labelled: bool,
    /// Hidden class `y`, known only for synthetic or annotated evaluation data.
    pub truth: Option<bool>,
    pub group: Option<u32>,
}

impl Sample {
    pub fn s(&self) -> u8 {
        u8::from(self.labelled)
    }
}

/// An ordered, validated collection of samples with ids `0..k` and a common
/// feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PuDataset {
    samples: Vec<Sample>,
    dim: usize,
}

impl PuDataset {
    /// Samples may arrive in any order; they are sorted by id and must cover
    /// `0..k` exactly once.
    pub fn new(mut samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(PuError::EmptyDataset);
        }
        samples.sort_by_key(|s| s.id);
        let dim = samples[0].features.len();
        if dim == 0 {
            return Err(PuError::Format("samples have no features".into()));
        }
        for (pos, sample) in samples.iter().enumerate() {
            if sample.id != pos {
                return Err(PuError::Validation(format!(
                    "sample ids must be unique and contiguous from 0; expected id {pos}, found {}",
                    sample.id
                )));
            }
            if sample.features.len() != dim {
                return Err(PuError::Format(format!(
                    "sample {} has {} features, expected {dim}",
                    sample.id,
                    sample.features.len()
                )));
            }
            if sample.labelled && sample.truth == Some(false) {
                return Err(PuError::Validation(format!(
                    "sample {} is labelled but its truth is negative",
                    sample.id
                )));
            }
        }
        Ok(Self { samples, dim })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labelled_count(&self) -> usize {
        self.samples.iter().filter(|s| s.labelled).count()
    }

    pub fn labelled_fraction(&self) -> f64 {
        self.labelled_count() as f64 / self.len() as f64
    }

    pub fn unlabelled_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().filter(|s| !s.labelled).map(|s| s.id)
    }

    pub fn has_truth(&self) -> bool {
        self.samples.iter().all(|s| s.truth.is_some())
    }

    /// Ids lacking a gold label, in ascending order.
    pub fn missing_truth(&self) -> Vec<usize> {
        self.samples
            .iter()
            .filter(|s| s.truth.is_none())
            .map(|s| s.id)
            .collect()
    }

    /// Builds a new dataset from `ids` (in the given order), renumbered from 0.
    /// The second value maps new ids back to the originals.
    pub fn subset(&self, ids: &[usize]) -> Result<(PuDataset, Vec<usize>)> {
        let samples = ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut s = self
                    .samples
                    .get(old)
                    .ok_or_else(|| PuError::Validation(format!("unknown sample id {old}")))?
                    .clone();
                s.id = new_id;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((PuDataset::new(samples)?, ids.to_vec()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(DataFormat::Csv),
            Some("jsonl") | Some("ndjson") => Ok(DataFormat::Jsonl),
            other => Err(PuError::Format(format!(
                "cannot infer dataset format from extension {other:?}"
            ))),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<PuDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PuError::io(path, e))?;
    match format {
        DataFormat::Csv => parse_csv(&text),
        DataFormat::Jsonl => parse_jsonl(&text),
    }
}

fn parse_binary(field: &str, what: &str, row: usize) -> Result<bool> {
    let value: i64 = field
        .trim()
        .parse()
        .map_err(|_| PuError::Format(format!("row {row}: {what} {field:?} is not an integer")))?;
    match value {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(PuError::Validation(format!(
            "row {row}: {what} must be 0 or 1, found {v}"
        ))),
    }
}

pub fn parse_csv(text: &str) -> Result<PuDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = match reader.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        Ok(_) => return Err(PuError::EmptyDataset),
        Err(e) => return Err(PuError::Format(e.to_string())),
    };

    let position = |name: &str| headers.iter().position(|h| h == name);
    let id_col = position("id").ok_or_else(|| PuError::Format("missing `id` column".into()))?;
    let label_col =
        position("label").ok_or_else(|| PuError::Format("missing `label` column".into()))?;
    let truth_col = position("truth");
    let group_col = position("group");
    let mut feature_cols = Vec::new();
    while let Some(col) = position(&format!("f{}", feature_cols.len())) {
        feature_cols.push(col);
    }
    let known = 2 + usize::from(truth_col.is_some()) + usize::from(group_col.is_some());
    if feature_cols.is_empty() || known + feature_cols.len() != headers.len() {
        return Err(PuError::Format(
            "header must be id,label[,truth][,group],f0..f{d-1}".into(),
        ));
    }

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| PuError::Format(e.to_string()))?;
        let id = record[id_col]
            .parse::<usize>()
            .map_err(|_| PuError::Format(format!("row {row}: bad id {:?}", &record[id_col])))?;
        let labelled = parse_binary(&record[label_col], "label", row)?;
        let truth = match truth_col.map(|c| &record[c]) {
            None | Some("") => None,
            Some(v) => Some(parse_binary(v, "truth", row)?),
        };
        let group = match group_col.map(|c| &record[c]) {
            None | Some("") => None,
            Some(v) => Some(
                v.parse::<u32>()
                    .map_err(|_| PuError::Format(format!("row {row}: bad group {v:?}")))?,
            ),
        };
        let features = feature_cols
            .iter()
            .map(|&c| {
                record[c].parse::<f64>().map_err(|_| {
                    PuError::Format(format!("row {row}: bad feature {:?}", &record[c]))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id,
            features,
            labelled,
            truth,
            group,
        });
    }
    PuDataset::new(samples)
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    id: usize,
    label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<u32>,
    features: Vec<f64>,
}

fn binary_value(v: i64, what: &str, row: usize) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(PuError::Validation(format!(
            "row {row}: {what} must be 0 or 1, found {v}"
        ))),
    }
}

pub fn parse_jsonl(text: &str) -> Result<PuDataset> {
    let mut samples = Vec::new();
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonRow = serde_json::from_str(line)
            .map_err(|e| PuError::Format(format!("line {}: {e}", row + 1)))?;
        samples.push(Sample {
            id: parsed.id,
            labelled: binary_value(parsed.label, "label", row)?,
            truth: parsed
                .truth
                .map(|t| binary_value(t, "truth", row))
                .transpose()?,
            group: parsed.group,
            features: parsed.features,
        });
    }
    PuDataset::new(samples)
}

/// Serializes in the CSV layout described at module level. `truth` is
/// written when any sample carries one, `group` likewise.
pub fn to_csv(ds: &PuDataset) -> String {
    let with_truth = ds.samples.iter().any(|s| s.truth.is_some());
    let with_group = ds.samples.iter().any(|s| s.group.is_some());
    let mut out = String::from("id,label");
    if with_truth {
        out.push_str(",truth");
    }
    if with_group {
        out.push_str(",group");
    }
    for j in 0..ds.dim {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for s in &ds.samples {
        let _ = write!(out, "{},{}", s.id, s.s());
        if with_truth {
            out.push(',');
            if let Some(t) = s.truth {
                out.push(if t { '1' } else { '0' });
            }
        }
        if with_group {
            out.push(',');
            if let Some(g) = s.group {
                let _ = write!(out, "{g}");
            }
        }
        for x in &s.features {
            let _ = write!(out, ",{x:?}");
        }
        out.push('\n');
    }
    out
}

pub fn to_jsonl(ds: &PuDataset) -> String {
    let mut out = String::new();
    for s in &ds.samples {
        let row = JsonRow {
            id: s.id,
            label: i64::from(s.s()),
            truth: s.truth.map(i64::from),
            group: s.group,
            features: s.features.clone(),
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(ds: &PuDataset, path: impl AsRef<Path>, format: DataFormat) -> Result<()> {
    let path = path.as_ref();
    let body = match format {
        DataFormat::Csv => to_csv(ds),
        DataFormat::Jsonl => to_jsonl(ds),
    };
    fs::write(path, body).map_err(|e| PuError::io(path, e))
}

/// Disjoint train/validation id sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn val_positive_ids<'a>(&'a self, ds: &'a PuDataset) -> impl Iterator<Item = usize> + 'a {
        self.val_ids
            .iter()
            .copied()
            .filter(move |&id| ds.sample(id).labelled)
    }
}

/// Shuffles ids with ChaCha8 under `seed` and cuts at `round(ratio * k)`.
/// If no labelled sample lands in validation, the draw is redone stratified
/// on `s`: validation receives `max(1, round((1 - ratio) * |labelled|))`
/// labelled ids (taken in shuffled order) and is topped up with unlabelled ids.
pub fn split_train_val(ds: &PuDataset, ratio: f64, seed: u64) -> Result<SplitSpec> {
    let n_train = train_size(ds, ratio)?;
    let n_labelled = ds.labelled_count();
    if n_labelled == 0 {
        return Err(PuError::NoPositives(
            "validation needs at least one labelled sample".into(),
        ));
    }
    let k = ds.len();
    let order = shuffled_ids(k, seed);
    let (mut train, mut val): (Vec<usize>, Vec<usize>) =
        (order[..n_train].to_vec(), order[n_train..].to_vec());

    if !val.iter().any(|&id| ds.sample(id).labelled) {
        let n_val = k - n_train;
        let (labelled, unlabelled): (Vec<usize>, Vec<usize>) =
            order.iter().partition(|&&id| ds.sample(id).labelled);
        let want = (((1.0 - ratio) * n_labelled as f64).round() as usize)
            .max(1)
            .min(n_val);
        val = labelled[..want]
            .iter()
            .chain(&unlabelled[..n_val - want])
            .copied()
            .collect();
        train = labelled[want..]
            .iter()
            .chain(&unlabelled[n_val - want..])
            .copied()
            .collect();
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(SplitSpec {
        train_ids: train,
        val_ids: val,
        seed,
    })
}

/// The plain shuffled cut of [`split_train_val`] without the labelled-sample
/// requirement on the validation side.
pub fn split_unstratified(ds: &PuDataset, ratio: f64, seed: u64) -> Result<SplitSpec> {
    let n_train = train_size(ds, ratio)?;
    let order = shuffled_ids(ds.len(), seed);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok(SplitSpec {
        train_ids: train,
        val_ids: val,
        seed,
    })
}

fn train_size(ds: &PuDataset, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PuError::Config(format!("split ratio {ratio} not in (0,1)")));
    }
    let k = ds.len();
    let n_train = (ratio * k as f64).round() as usize;
    if n_train == 0 || n_train >= k {
        return Err(PuError::Config(format!(
            "split ratio {ratio} on {k} samples leaves an empty side"
        )));
    }
    Ok(n_train)
}

fn shuffled_ids(k: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    order
}

/// Two class-conditional Gaussians with a shared diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub mean_negative: Vec<f64>,
    pub mean_positive: Vec<f64>,
    pub variance: Vec<f64>,
}

impl FeatureModel {
    /// Means at `-gap/2` and `+gap/2` on every axis, unit variances.
    pub fn separated(dim: usize, gap: f64) -> Self {
        Self {
            mean_negative: vec![-gap / 2.0; dim],
            mean_positive: vec![gap / 2.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.variance.len()
    }

    /// Mahalanobis distance between the class means.
    pub fn separation(&self) -> f64 {
        self.mean_positive
            .iter()
            .zip(&self.mean_negative)
            .zip(&self.variance)
            .map(|((p, n), v)| (p - n) * (p - n) / v)
            .sum::<f64>()
            .sqrt()
    }

    /// `ln N(x; mean_positive) - ln N(x; mean_negative)`.
    pub fn log_likelihood_ratio(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean_positive)
            .zip(&self.mean_negative)
            .zip(&self.variance)
            .map(|(((x, p), n), v)| ((x - n) * (x - n) - (x - p) * (x - p)) / (2.0 * v))
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let d = self.variance.len();
        if d == 0 || self.mean_negative.len() != d || self.mean_positive.len() != d {
            return Err(PuError::Config(
                "feature_model means and variance must share a nonzero dimension".into(),
            ));
        }
        if self.variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(PuError::Config(
                "feature_model variances must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarConfig {
    pub n: usize,
    /// True class prior p(y=1).
    pub prior: f64,
    /// True label frequency c* = p(s=1 | y=1).
    pub label_freq: f64,
    pub feature_model: FeatureModel,
    pub seed: u64,
    /// When set, sample `i` is placed in group `i % groups`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<u32>,
}

impl ScarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(PuError::Config("n must be at least 1".into()));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(PuError::Config(format!(
                "prior out of range: {} (must lie in (0,1))",
                self.prior
            )));
        }
        if !(self.label_freq > 0.0 && self.label_freq <= 1.0) {
            return Err(PuError::Config(format!(
                "label_freq out of range: {} (must lie in (0,1])",
                self.label_freq
            )));
        }
        if self.groups == Some(0) {
            return Err(PuError::Config("groups must be at least 1".into()));
        }
        self.feature_model.validate()
    }

    /// Bayes posterior p(y=1 | x) under the generating model.
    pub fn posterior_positive(&self, x: &[f64]) -> f64 {
        let logit =
            (self.prior / (1.0 - self.prior)).ln() + self.feature_model.log_likelihood_ratio(x);
        1.0 / (1.0 + (-logit).exp())
    }

    /// True labelling propensity p(s=1 | x) = c* p(y=1 | x).
    pub fn labelling_probability(&self, x: &[f64]) -> f64 {
        self.label_freq * self.posterior_positive(x)
    }
}

/// Draws, per sample in id order: `u < prior` for y, one standard normal per
/// feature, then `u < label_freq` for s (the uniform is drawn for negatives
/// too, so streams line up across label frequencies).
pub fn generate_scar(cfg: &ScarConfig) -> Result<PuDataset> {
    cfg.validate()?;
    let fm = &cfg.feature_model;
    let mut rng = seed::rng(cfg.seed);
    let samples = (0..cfg.n)
        .map(|id| {
            let y = rng.random::<f64>() < cfg.prior;
            let means = if y {
                &fm.mean_positive
            } else {
                &fm.mean_negative
            };
            let features = means
                .iter()
                .zip(&fm.variance)
                .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let selected = rng.random::<f64>() < cfg.label_freq;
            Sample {
                id,
                features,
                labelled: y && selected,
                truth: Some(y),
                group: cfg.groups.map(|g| (id % g as usize) as u32),
            }
        })
        .collect();
    PuDataset::new(samples)
}

/// Distinct group ids present in the dataset, ascending.
pub fn groups(ds: &PuDataset) -> Result<BTreeSet<u32>> {
    let missing: Vec<usize> = ds
        .samples()
        .iter()
        .filter(|s| s.group.is_none())
        .map(|s| s.id)
        .collect();
    if !missing.is_empty() {
        return Err(PuError::MissingGroups(missing));
    }
    Ok(ds.samples().iter().filter_map(|s| s.group).collect())
}
