//! Elkan–Noto positive-unlabelled estimation and positive-unlabelled
//! conversion (PUC).
//!
//! With `f(x) ~ p(s=1|x)` and the label frequency `c = p(s=1|y=1)`:
//!
//! * `c` is the mean of `f` over labelled validation samples;
//! * an unlabelled sample has weight `w(x) = (1-c)/c * f(x)/(1-f(x))`,
//!   clamped to `[0,1]`, the posterior p(y=1 | x, s=0);
//! * the class prior is `(|labelled| + sum of w over unlabelled) / k`;
//! * PUC ranks unlabelled samples by unclamped `w`, descending with ties to the
//!   lower id, and relabels them positive one at a time until the positive
//!   fraction reaches the prior estimate.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::PuDataset;
use crate::error::{PuError, Result};
use crate::model::{Scorer, WeightedExample};

/// Lower clamp of the estimated label frequency.
pub const MIN_LABEL_FREQ: f64 = 1e-4;

/// Prior estimates above this are reported as a warning: nearly every
/// unlabelled sample will be converted.
pub const HIGH_PRIOR_WARNING: f64 = 0.95;

/// Mean score of `f` over known positives, clamped to `[1e-4, 1]`.
pub fn estimate_c<'a, S, I>(f: &S, positives: I) -> Result<f64>
where
    S: Scorer + ?Sized,
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in positives {
        sum += f.score(x)?;
        n += 1;
    }
    if n == 0 {
        return Err(PuError::NoPositives(
            "label frequency is undefined without labelled validation samples".into(),
        ));
    }
    Ok((sum / n as f64).clamp(MIN_LABEL_FREQ, 1.0))
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(PuError::Validation(format!(
            "label frequency {c} not in (0,1]"
        )));
    }
    Ok(())
}

/// `(1-c)/c * p_s/(1-p_s)` before clamping.
pub fn raw_weight(p_s: f64, c: f64) -> Result<f64> {
    check_c(c)?;
    if !(p_s > 0.0 && p_s < 1.0) {
        return Err(PuError::Validation(format!(
            "labelling probability {p_s} must lie strictly inside (0,1)"
        )));
    }
    Ok((1.0 - c) / c * (p_s / (1.0 - p_s)))
}

pub fn weight(p_s: f64, c: f64) -> Result<f64> {
    Ok(raw_weight(p_s, c)?.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlabelledWeight {
    pub id: usize,
    /// Unclamped value, used for ranking.
    pub raw: f64,
    /// Clamped to `[0,1]`, used for loss weights and the prior.
    pub weight: f64,
}

/// Weights of every unlabelled sample, in ascending id order.
pub fn compute_weights<S: Scorer + ?Sized>(
    ds: &PuDataset,
    f: &S,
    c: f64,
) -> Result<Vec<UnlabelledWeight>> {
    check_c(c)?;
    ds.unlabelled_ids()
        .map(|id| {
            let raw = raw_weight(f.score(&ds.sample(id).features)?, c)?;
            Ok(UnlabelledWeight {
                id,
                raw,
                weight: raw.clamp(0.0, 1.0),
            })
        })
        .collect()
}

pub fn weight_map(table: &[UnlabelledWeight]) -> BTreeMap<usize, f64> {
    table.iter().map(|w| (w.id, w.weight)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuEstimates {
    pub c: f64,
    pub prior: f64,
    /// Clamped `w(x)` per unlabelled id.
    pub weights: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PuEstimates {
    pub fn from_scorer<S: Scorer + ?Sized>(ds: &PuDataset, f: &S, c: f64) -> Result<Self> {
        Self::from_table(ds, &compute_weights(ds, f, c)?, c)
    }

    pub fn from_table(ds: &PuDataset, table: &[UnlabelledWeight], c: f64) -> Result<Self> {
        let weights = weight_map(table);
        let prior = estimate_prior(ds, &weights)?;
        let mut warnings = Vec::new();
        if prior > HIGH_PRIOR_WARNING {
            let msg = format!(
                "estimated prior {prior:.4} is close to 1; conversion will relabel nearly all unlabelled samples"
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        Ok(Self {
            c,
            prior,
            weights,
            warnings,
        })
    }
}

/// One row per labelled sample `(1, 1.0)` and, per unlabelled sample, the
/// pair `(1, w)`, `(0, 1 - w)`. Rows appear in ascending id order.
pub fn build_pu_training_set<S: Scorer + ?Sized>(
    ds: &PuDataset,
    f: &S,
    c: f64,
) -> Result<Vec<WeightedExample>> {
    let weights = weight_map(&compute_weights(ds, f, c)?);
    let ids: Vec<usize> = (0..ds.len()).collect();
    Ok(assemble_training_set(ds, &ids, &weights, &BTreeSet::new()))
}

/// Training rows for the samples in `ids` (in that order): labelled and
/// converted samples as single unit-weight positives, other unlabelled
/// samples as a weighted positive/negative pair.
pub fn assemble_training_set(
    ds: &PuDataset,
    ids: &[usize],
    weights: &BTreeMap<usize, f64>,
    converted: &BTreeSet<usize>,
) -> Vec<WeightedExample> {
    let mut rows = Vec::with_capacity(2 * ids.len());
    for &id in ids {
        let sample = ds.sample(id);
        let x = &sample.features;
        if sample.labelled || converted.contains(&id) {
            rows.push(WeightedExample::new(x.clone(), true, 1.0, id));
        } else {
            let w = weights.get(&id).copied().unwrap_or(0.0);
            rows.push(WeightedExample::new(x.clone(), true, w, id));
            rows.push(WeightedExample::new(x.clone(), false, 1.0 - w, id));
        }
    }
    rows
}

fn check_weight_cover(ds: &PuDataset, weights: &BTreeMap<usize, f64>) -> Result<()> {
    let expected: BTreeSet<usize> = ds.unlabelled_ids().collect();
    let given: BTreeSet<usize> = weights.keys().copied().collect();
    if expected != given {
        return Err(PuError::Validation(
            "weights must cover exactly the unlabelled sample ids".into(),
        ));
    }
    Ok(())
}

/// `(|labelled| + sum_{unlabelled} w) / k`, summing in ascending id order.
pub fn estimate_prior(ds: &PuDataset, weights: &BTreeMap<usize, f64>) -> Result<f64> {
    check_weight_cover(ds, weights)?;
    let total: f64 = weights.values().sum();
    Ok((ds.labelled_count() as f64 + total) / ds.len() as f64)
}

/// Empirical `E[h(x, y)]` where each unlabelled sample contributes
/// `w h(x,1) + (1-w) h(x,0)` and each labelled one `h(x,1)`.
pub fn estimate_expectation<H, S>(h: H, ds: &PuDataset, f: &S, c: f64) -> Result<f64>
where
    H: Fn(&[f64], bool) -> f64,
    S: Scorer + ?Sized,
{
    check_c(c)?;
    let mut total = 0.0;
    for sample in ds.samples() {
        let x = &sample.features;
        total += if sample.labelled {
            h(x, true)
        } else {
            let w = weight(f.score(x)?, c)?;
            w * h(x, true) + (1.0 - w) * h(x, false)
        };
    }
    Ok(total / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedDataset {
    /// Converted ids in the order they were converted.
    pub converted_ids: Vec<usize>,
    pub prior: f64,
    /// Label `l` per sample id: 1 for labelled and converted samples.
    pub labels: Vec<bool>,
}

impl ConvertedDataset {
    pub fn converted_set(&self) -> BTreeSet<usize> {
        self.converted_ids.iter().copied().collect()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l).count() as f64 / self.labels.len() as f64
    }
}

/// Unlabelled ids by unclamped weight, descending; equal weights by id.
pub fn puc_ranking(table: &[UnlabelledWeight]) -> Vec<usize> {
    let mut ranked: Vec<&UnlabelledWeight> = table.iter().collect();
    ranked.sort_by(|a, b| b.raw.total_cmp(&a.raw).then(a.id.cmp(&b.id)));
    ranked.into_iter().map(|w| w.id).collect()
}

pub fn puc_convert<S: Scorer + ?Sized>(ds: &PuDataset, f: &S, c: f64) -> Result<ConvertedDataset> {
    puc_convert_with_weights(ds, &compute_weights(ds, f, c)?)
}

/// Conversion from a precomputed weight table: the prior comes from the
/// clamped weights, the ranking from the raw ones.
pub fn puc_convert_with_weights(
    ds: &PuDataset,
    table: &[UnlabelledWeight],
) -> Result<ConvertedDataset> {
    let prior = estimate_prior(ds, &weight_map(table))?;
    let k = ds.len() as f64;
    let mut positives = ds.labelled_count();
    let mut labels: Vec<bool> = ds.samples().iter().map(|s| s.labelled).collect();
    let mut converted_ids = Vec::new();
    for id in puc_ranking(table) {
        if positives as f64 / k >= prior {
            break;
        }
        labels[id] = true;
        converted_ids.push(id);
        positives += 1;
    }
    Ok(ConvertedDataset {
        converted_ids,
        prior,
        labels,
    })
}
