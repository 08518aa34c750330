//! Training modes: PN baseline, PU (duplicate-and-weight) and PUC
//! (conversion followed by duplicate-and-weight), optional warm start from a
//! pretrained model, and majority-vote ensembles.
//!
//! Every run is a pure function of its datasets, configuration and run seed
//! (`TrainConfig::seed`). Component seeds are derived from the run seed with
//! the labels `"split"`, `"f"` and `"g"` (see [`crate::seed`]).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{split_train_val, split_unstratified, PuDataset, SplitSpec};
use crate::error::{PuError, Result};
use crate::model::{fit, ProbClassifier, TrainConfig, Validation, WeightedExample};
use crate::pu::{
    assemble_training_set, compute_weights, estimate_c, puc_convert_with_weights, ConvertedDataset,
    PuEstimates, UnlabelledWeight,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeTag {
    Pn,
    Pu,
    Puc,
}

impl fmt::Display for ModeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModeTag::Pn => "pn",
            ModeTag::Pu => "pu",
            ModeTag::Puc => "puc",
        })
    }
}

impl FromStr for ModeTag {
    type Err = PuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pn" => Ok(ModeTag::Pn),
            "pu" => Ok(ModeTag::Pu),
            "puc" => Ok(ModeTag::Puc),
            other => Err(PuError::Config(format!(
                "unknown mode {other:?}; expected pn, pu or puc"
            ))),
        }
    }
}

/// A pretrained model whose body warm-starts g.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSource {
    pub model: ProbClassifier,
    pub mode: Option<ModeTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMode {
    pub tag: ModeTag,
    pub transfer: Option<TransferSource>,
}

impl TrainMode {
    pub fn plain(tag: ModeTag) -> Self {
        Self {
            tag,
            transfer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    /// Fraction of samples used for training; the rest is validation.
    pub split_ratio: f64,
    /// Known label frequency. When set it replaces the estimate of `c`.
    pub label_freq: Option<f64>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            split_ratio: 0.8,
            label_freq: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeOutcome {
    pub tag: ModeTag,
    pub g: ProbClassifier,
    pub f: Option<ProbClassifier>,
    pub estimates: Option<PuEstimates>,
    pub conversion: Option<ConvertedDataset>,
    pub split: SplitSpec,
    /// Rows g was trained on, in build order.
    pub g_training_set: Vec<WeightedExample>,
}

pub fn train_pn(ds: &PuDataset, cfg: &TrainConfig) -> Result<ProbClassifier> {
    Ok(run_mode(ds, ModeTag::Pn, cfg, &PipelineOptions::default(), None)?.g)
}

pub fn train_pu(
    ds: &PuDataset,
    cfg: &TrainConfig,
) -> Result<(ProbClassifier, ProbClassifier, PuEstimates)> {
    let out = run_mode(ds, ModeTag::Pu, cfg, &PipelineOptions::default(), None)?;
    Ok((
        out.f.expect("pu trains f"),
        out.g,
        out.estimates.expect("pu estimates"),
    ))
}

pub fn train_puc(
    ds: &PuDataset,
    cfg: &TrainConfig,
) -> Result<(
    ProbClassifier,
    ProbClassifier,
    PuEstimates,
    ConvertedDataset,
)> {
    let out = run_mode(ds, ModeTag::Puc, cfg, &PipelineOptions::default(), None)?;
    Ok((
        out.f.expect("puc trains f"),
        out.g,
        out.estimates.expect("puc estimates"),
        out.conversion.expect("puc conversion"),
    ))
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(PuError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Runs one mode. `warm_start`, when given, is the initial g (already with a
/// fresh head); f is always trained from scratch on `(x, s)`.
pub fn run_mode(
    ds: &PuDataset,
    tag: ModeTag,
    cfg: &TrainConfig,
    opts: &PipelineOptions,
    warm_start: Option<ProbClassifier>,
) -> Result<ModeOutcome> {
    cfg.validate()?;
    if let Some(init) = &warm_start {
        check_dim(init.input_dim(), ds.dim())?;
    }
    let run_seed = cfg.seed;
    let split_seed = seed::derive(run_seed, "split");
    let split = if tag == ModeTag::Pn && ds.labelled_count() == 0 {
        split_unstratified(ds, opts.split_ratio, split_seed)?
    } else {
        split_train_val(ds, opts.split_ratio, split_seed)?
    };
    let val = Validation::new(ds, &split);
    let g_cfg = cfg.with_seed(seed::derive(run_seed, "g"));
    let g_init = warm_start.unwrap_or_else(|| {
        ProbClassifier::init(ds.dim(), cfg.hidden_dim, seed::derive(g_cfg.seed, "init"))
    });

    let pn_rows: Vec<WeightedExample> = split
        .train_ids
        .iter()
        .map(|&id| {
            let s = ds.sample(id);
            WeightedExample::new(s.features.clone(), s.labelled, 1.0, id)
        })
        .collect();

    if tag == ModeTag::Pn {
        let g = fit(g_init, &pn_rows, val, &g_cfg)?.model;
        return Ok(ModeOutcome {
            tag,
            g,
            f: None,
            estimates: None,
            conversion: None,
            split,
            g_training_set: pn_rows,
        });
    }

    if ds.labelled_count() == 0 {
        return Err(PuError::NoPositives(
            "PU training needs labelled samples".into(),
        ));
    }
    let f_cfg = cfg.with_seed(seed::derive(run_seed, "f"));
    let f_init = ProbClassifier::init(ds.dim(), cfg.hidden_dim, seed::derive(f_cfg.seed, "init"));
    let f = fit(f_init, &pn_rows, val, &f_cfg)?.model;

    let c = match opts.label_freq {
        Some(c) if c > 0.0 && c <= 1.0 => c,
        Some(c) => return Err(PuError::Config(format!("label_freq {c} not in (0,1]"))),
        None => estimate_c(
            &f,
            split
                .val_positive_ids(ds)
                .map(|id| ds.sample(id).features.as_slice()),
        )?,
    };
    let table: Vec<UnlabelledWeight> = compute_weights(ds, &f, c)?;
    let mut estimates = PuEstimates::from_table(ds, &table, c)?;
    if table.is_empty() {
        let msg = "dataset has no unlabelled samples; PU training degenerates to PN".to_string();
        warn!("{msg}");
        estimates.warnings.push(msg);
    }

    let conversion = match tag {
        ModeTag::Puc => Some(puc_convert_with_weights(ds, &table)?),
        _ => None,
    };
    let converted: BTreeSet<usize> = conversion
        .as_ref()
        .map(ConvertedDataset::converted_set)
        .unwrap_or_default();
    let rows = assemble_training_set(ds, &split.train_ids, &estimates.weights, &converted);
    let g = fit(g_init, &rows, val, &g_cfg)?.model;

    Ok(ModeOutcome {
        tag,
        g,
        f: Some(f),
        estimates: Some(estimates),
        conversion,
        split,
        g_training_set: rows,
    })
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub source: ModeOutcome,
    /// Source g with a freshly drawn head, before any target step.
    pub initial: ProbClassifier,
    pub target: ModeOutcome,
}

/// Trains g on `source`, swaps in a new head (seed `derive(run, "head")`) and
/// continues on `target`. The source run uses seed `derive(run, "source")`,
/// the target run `derive(run, "target")`.
pub fn pretrain_finetune(
    source: &PuDataset,
    target: &PuDataset,
    source_mode: ModeTag,
    target_mode: ModeTag,
    cfg: &TrainConfig,
    opts: &PipelineOptions,
) -> Result<TransferOutcome> {
    check_dim(source.dim(), target.dim())?;
    let run_seed = cfg.seed;
    let source_run = run_mode(
        source,
        source_mode,
        &cfg.with_seed(seed::derive(run_seed, "source")),
        opts,
        None,
    )?;
    let initial = source_run.g.reinit_head(seed::derive(run_seed, "head"));
    let target_run = run_mode(
        target,
        target_mode,
        &cfg.with_seed(seed::derive(run_seed, "target")),
        opts,
        Some(initial.clone()),
    )?;
    Ok(TransferOutcome {
        source: source_run,
        initial,
        target: target_run,
    })
}

/// Runs `mode` on `ds`, warm-starting from the transfer source if any.
pub fn run_train_mode(
    ds: &PuDataset,
    mode: &TrainMode,
    cfg: &TrainConfig,
    opts: &PipelineOptions,
) -> Result<ModeOutcome> {
    let warm = match &mode.transfer {
        Some(src) => {
            check_dim(src.model.input_dim(), ds.dim())?;
            Some(src.model.reinit_head(seed::derive(cfg.seed, "head")))
        }
        None => None,
    };
    run_mode(ds, mode.tag, cfg, opts, warm)
}

/// Members vote `p >= 0.5`; a strict minority of negative votes (including
/// an exact tie) yields the positive label.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub members: Vec<ProbClassifier>,
}

pub const VOTE_THRESHOLD: f64 = 0.5;

impl EnsembleModel {
    pub fn new(members: Vec<ProbClassifier>) -> Result<Self> {
        if members.is_empty() {
            return Err(PuError::Validation(
                "ensemble needs at least one member".into(),
            ));
        }
        Ok(Self { members })
    }
}

/// Positive votes for each member's probability.
pub fn majority_vote(probs: &[f64]) -> Result<bool> {
    if probs.is_empty() {
        return Err(PuError::Validation(
            "ensemble needs at least one member".into(),
        ));
    }
    let votes = probs.iter().filter(|&&p| p >= VOTE_THRESHOLD).count();
    Ok(2 * votes >= probs.len())
}

pub fn ensemble_predict(e: &EnsembleModel, x: &[f64]) -> Result<bool> {
    let probs = e
        .members
        .iter()
        .map(|m| m.predict_proba(x))
        .collect::<Result<Vec<_>>>()?;
    majority_vote(&probs)
}
