//! Cross-validation protocols and multi-seed evaluation reports.
//!
//! A report (schema version 1) holds one row per (fold, seed) run, per-seed
//! summaries, mean and population standard deviation across seeds, and the
//! metrics of the per-fold majority-vote ensemble over seeds. Fold-level
//! metrics are combined two ways and both are always reported: `macro`
//! averages per-fold scores, `micro` scores the pooled confusion matrix.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{groups, PuDataset};
use crate::error::{PuError, Result};
use crate::metrics::{self, Confusion, Prf};
use crate::model::TrainConfig;
use crate::pipeline::{majority_vote, run_train_mode, PipelineOptions, TrainMode, VOTE_THRESHOLD};
use crate::seed;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FoldSpec {
    LeaveOneGroupOut,
    Kfold { k: usize },
}

impl FromStr for FoldSpec {
    type Err = PuError;

    /// `group` (or `logo`) for leave-one-group-out; `kfold:K` or a bare `K`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "group" || s == "logo" || s == "leave_one_group_out" {
            return Ok(FoldSpec::LeaveOneGroupOut);
        }
        let k = s.strip_prefix("kfold:").unwrap_or(&s);
        k.parse::<usize>()
            .map(|k| FoldSpec::Kfold { k })
            .map_err(|_| PuError::Config(format!("bad fold spec {s:?}; use `group` or `kfold:K`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    /// Group id for leave-one-group-out, fold number otherwise.
    pub label: String,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub kind: String,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// A single train/test split, outside the partition protocols.
    pub fn holdout(train_ids: Vec<usize>, test_ids: Vec<usize>) -> Self {
        FoldPlan {
            kind: "holdout".into(),
            folds: vec![Fold {
                index: 0,
                label: "0".into(),
                train_ids,
                test_ids,
            }],
        }
    }
}

fn complement(k: usize, test: &[usize]) -> Vec<usize> {
    let test: BTreeSet<usize> = test.iter().copied().collect();
    (0..k).filter(|id| !test.contains(id)).collect()
}

/// Leave-one-group-out: one fold per distinct group, ascending group id.
/// k-fold: ids shuffled with ChaCha8 under `seed`, then cut into `k` folds
/// whose sizes differ by at most one (the first `n mod k` folds are larger).
pub fn build_fold_plan(ds: &PuDataset, spec: FoldSpec, seed: u64) -> Result<FoldPlan> {
    let n = ds.len();
    let folds = match spec {
        FoldSpec::LeaveOneGroupOut => {
            let all = groups(ds)?;
            if all.len() < 2 {
                return Err(PuError::Config(
                    "leave-one-group-out needs at least two groups".into(),
                ));
            }
            all.iter()
                .enumerate()
                .map(|(index, &g)| {
                    let test_ids: Vec<usize> = ds
                        .samples()
                        .iter()
                        .filter(|s| s.group == Some(g))
                        .map(|s| s.id)
                        .collect();
                    Fold {
                        index,
                        label: g.to_string(),
                        train_ids: complement(n, &test_ids),
                        test_ids,
                    }
                })
                .collect()
        }
        FoldSpec::Kfold { k } => {
            if k < 2 || k > n {
                return Err(PuError::Config(format!(
                    "k-fold needs 2 <= k <= n, got k={k}, n={n}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng(seed));
            let (base, extra) = (n / k, n % k);
            let mut start = 0;
            (0..k)
                .map(|index| {
                    let len = base + usize::from(index < extra);
                    let mut test_ids = order[start..start + len].to_vec();
                    start += len;
                    test_ids.sort_unstable();
                    Fold {
                        index,
                        label: index.to_string(),
                        train_ids: complement(n, &test_ids),
                        test_ids,
                    }
                })
                .collect()
        }
    };
    Ok(FoldPlan {
        kind: match spec {
            FoldSpec::LeaveOneGroupOut => "leave_one_group_out".into(),
            FoldSpec::Kfold { k } => format!("kfold:{k}"),
        },
        folds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
}

impl MetricStats {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = metrics::mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub fold: usize,
    pub fold_label: String,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub micro: Prf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: usize,
    pub precision: MetricStats,
    pub recall: MetricStats,
    pub f1: MetricStats,
    pub micro_precision: MetricStats,
    pub micro_recall: MetricStats,
    pub micro_f1: MetricStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<MetricStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFold {
    pub fold: usize,
    pub fold_label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub members: usize,
    pub per_fold: Vec<EnsembleFold>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub micro: Prf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: String,
    pub fold_kind: String,
    /// Standard deviations are population (divisor N) over seeds.
    pub std_kind: String,
    pub per_fold: Vec<RunRow>,
    pub per_seed: Vec<SeedSummary>,
    pub aggregate: Aggregate,
    pub ensembled: EnsembleSummary,
}

/// Predicted probabilities of one (fold, seed) run on its test ids.
#[derive(Debug, Clone)]
pub struct RunPredictions {
    pub fold: usize,
    pub seed: u64,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub mode: &'a TrainMode,
    pub train: &'a TrainConfig,
    pub opts: &'a PipelineOptions,
    pub seeds: &'a [u64],
    pub ranking: bool,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

pub fn mode_label(mode: &TrainMode) -> String {
    match &mode.transfer {
        None => mode.tag.to_string(),
        Some(src) => match src.mode {
            Some(m) => format!("{}+pretrained:{m}", mode.tag),
            None => format!("{}+pretrained", mode.tag),
        },
    }
}

/// Trains per (fold, seed) on the fold's training ids, predicts its test ids
/// and scores against the gold labels.
pub fn run_experiment(ds: &PuDataset, plan: &FoldPlan, exp: &Experiment<'_>) -> Result<EvalReport> {
    let missing = ds.missing_truth();
    if !missing.is_empty() {
        return Err(PuError::MissingTruth(missing));
    }
    if exp.seeds.is_empty() {
        return Err(PuError::Config("seed list is empty".into()));
    }
    if plan.folds.is_empty() {
        return Err(PuError::Config("fold plan is empty".into()));
    }
    if let Some(src) = &exp.mode.transfer {
        if src.model.input_dim() != ds.dim() {
            return Err(PuError::DimensionMismatch {
                expected: src.model.input_dim(),
                actual: ds.dim(),
            });
        }
    }
    let fold_data = plan
        .folds
        .iter()
        .map(|fold| Ok(ds.subset(&fold.train_ids)?.0))
        .collect::<Result<Vec<_>>>()?;

    let tasks: Vec<(usize, u64)> = (0..plan.folds.len())
        .flat_map(|f| exp.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let run = |&(fold, seed): &(usize, u64)| -> Result<RunPredictions> {
        let outcome = run_train_mode(
            &fold_data[fold],
            exp.mode,
            &exp.train.with_seed(seed),
            exp.opts,
        )?;
        let probs = plan.folds[fold]
            .test_ids
            .iter()
            .map(|&id| outcome.g.predict_proba(&ds.sample(id).features))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunPredictions { fold, seed, probs })
    };
    let runs = match exp.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| PuError::Config(format!("thread pool: {e}")))?
            .install(|| tasks.par_iter().map(run).collect::<Result<Vec<_>>>())?,
        None => tasks.par_iter().map(run).collect::<Result<Vec<_>>>()?,
    };
    assemble_report(
        ds,
        plan,
        &mode_label(exp.mode),
        exp.seeds,
        &runs,
        exp.ranking,
    )
}

/// Builds a report from per-run predictions. `runs` must hold one entry per
/// (fold, seed) pair, ordered by fold then by position in `seeds`.
pub fn assemble_report(
    ds: &PuDataset,
    plan: &FoldPlan,
    mode: &str,
    seeds: &[u64],
    runs: &[RunPredictions],
    ranking: bool,
) -> Result<EvalReport> {
    let n_seeds = seeds.len();
    if runs.len() != plan.folds.len() * n_seeds {
        return Err(PuError::Validation(
            "one run per (fold, seed) is required".into(),
        ));
    }
    let golds: Vec<Vec<bool>> = plan
        .folds
        .iter()
        .map(|f| {
            f.test_ids
                .iter()
                .map(|&id| ds.sample(id).truth.ok_or(PuError::MissingTruth(vec![id])))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    if ranking {
        if let Some(f) = golds.iter().position(|g| !g.iter().any(|&b| b)) {
            return Err(PuError::Validation(format!(
                "fold {} has no gold positive; AP is undefined",
                plan.folds[f].label
            )));
        }
    }

    let mut per_fold = Vec::with_capacity(runs.len());
    for r in runs {
        let fold = &plan.folds[r.fold];
        let gold = &golds[r.fold];
        let preds: Vec<bool> = r.probs.iter().map(|&p| p >= VOTE_THRESHOLD).collect();
        let confusion = Confusion::from_pairs(&preds, gold)?;
        let prf = confusion.scores();
        let ap = if ranking {
            Some(metrics::average_precision(&metrics::rank_by_score(
                &r.probs, gold,
            ))?)
        } else {
            None
        };
        per_fold.push(RunRow {
            fold: r.fold,
            fold_label: fold.label.clone(),
            seed: r.seed,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            ap,
            confusion,
        });
    }

    let per_seed: Vec<SeedSummary> = seeds
        .iter()
        .enumerate()
        .map(|(si, &seed)| {
            let rows: Vec<&RunRow> = per_fold.iter().skip(si).step_by(n_seeds).collect();
            summarize(seed, &rows)
        })
        .collect();

    let column = |get: fn(&SeedSummary) -> f64| -> MetricStats {
        MetricStats::of(&per_seed.iter().map(get).collect::<Vec<_>>())
    };
    let aggregate = Aggregate {
        seeds: n_seeds,
        precision: column(|s| s.macro_avg.precision),
        recall: column(|s| s.macro_avg.recall),
        f1: column(|s| s.macro_avg.f1),
        micro_precision: column(|s| s.micro.precision),
        micro_recall: column(|s| s.micro.recall),
        micro_f1: column(|s| s.micro.f1),
        map: ranking.then(|| column(|s| s.map.unwrap_or(0.0))),
    };

    let mut ens_folds = Vec::with_capacity(plan.folds.len());
    let mut pooled = Confusion::default();
    for (fi, fold) in plan.folds.iter().enumerate() {
        let members = &runs[fi * n_seeds..(fi + 1) * n_seeds];
        let gold = &golds[fi];
        let mut preds = Vec::with_capacity(gold.len());
        let mut keys = Vec::with_capacity(gold.len());
        for j in 0..gold.len() {
            let probs: Vec<f64> = members.iter().map(|m| m.probs[j]).collect();
            preds.push(majority_vote(&probs)?);
            let votes = probs.iter().filter(|&&p| p >= VOTE_THRESHOLD).count();
            let mean = probs.iter().sum::<f64>() / probs.len() as f64;
            keys.push((votes, mean));
        }
        let confusion = Confusion::from_pairs(&preds, gold)?;
        pooled = pooled.merge(confusion);
        let prf = confusion.scores();
        let ap = if ranking {
            let mut order: Vec<usize> = (0..gold.len()).collect();
            order.sort_by(|&a, &b| {
                keys[b]
                    .0
                    .cmp(&keys[a].0)
                    .then(keys[b].1.total_cmp(&keys[a].1))
            });
            let ranked: Vec<bool> = order.into_iter().map(|i| gold[i]).collect();
            Some(metrics::average_precision(&ranked)?)
        } else {
            None
        };
        ens_folds.push(EnsembleFold {
            fold: fi,
            fold_label: fold.label.clone(),
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            ap,
        });
    }
    let mean_of = |get: fn(&EnsembleFold) -> f64| {
        ens_folds.iter().map(get).sum::<f64>() / ens_folds.len() as f64
    };
    let ensembled = EnsembleSummary {
        members: n_seeds,
        macro_avg: Prf {
            precision: mean_of(|f| f.precision),
            recall: mean_of(|f| f.recall),
            f1: mean_of(|f| f.f1),
        },
        micro: pooled.scores(),
        map: ranking.then(|| mean_of(|f| f.ap.unwrap_or(0.0))),
        per_fold: ens_folds,
    };

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: mode.to_string(),
        fold_kind: plan.kind.clone(),
        std_kind: "population".into(),
        per_fold,
        per_seed,
        aggregate,
        ensembled,
    })
}

fn summarize(seed: u64, rows: &[&RunRow]) -> SeedSummary {
    let n = rows.len() as f64;
    let mean = |get: fn(&RunRow) -> f64| rows.iter().map(|r| get(r)).sum::<f64>() / n;
    let pooled = rows
        .iter()
        .fold(Confusion::default(), |acc, r| acc.merge(r.confusion));
    SeedSummary {
        seed,
        macro_avg: Prf {
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
        },
        micro: pooled.scores(),
        map: rows
            .iter()
            .map(|r| r.ap)
            .sum::<Option<f64>>()
            .map(|total| total / n),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat CSV: `row,fold,seed,precision,recall,f1,ap`. Row kinds are `run`
    /// (one per fold x seed), `seed_macro`, `seed_micro`, `mean`, `std`,
    /// `micro_mean`, `micro_std`, `ensemble` (one per fold),
    /// `ensemble_macro` and `ensemble_micro`.
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let mut out = String::from("row,fold,seed,precision,recall,f1,ap\n");
        let mut line =
            |kind: &str, fold: &str, seed: &str, p: f64, r: f64, f: f64, ap: Option<f64>| {
                let _ = writeln!(out, "{kind},{fold},{seed},{p},{r},{f},{}", opt(ap));
            };
        for r in &self.per_fold {
            line(
                "run",
                &r.fold_label,
                &r.seed.to_string(),
                r.precision,
                r.recall,
                r.f1,
                r.ap,
            );
        }
        for s in &self.per_seed {
            let seed = s.seed.to_string();
            let m = &s.macro_avg;
            line("seed_macro", "", &seed, m.precision, m.recall, m.f1, s.map);
            line(
                "seed_micro",
                "",
                &seed,
                s.micro.precision,
                s.micro.recall,
                s.micro.f1,
                None,
            );
        }
        let a = &self.aggregate;
        let map = a.map;
        line(
            "mean",
            "",
            "",
            a.precision.mean,
            a.recall.mean,
            a.f1.mean,
            map.map(|m| m.mean),
        );
        line(
            "std",
            "",
            "",
            a.precision.std,
            a.recall.std,
            a.f1.std,
            map.map(|m| m.std),
        );
        line(
            "micro_mean",
            "",
            "",
            a.micro_precision.mean,
            a.micro_recall.mean,
            a.micro_f1.mean,
            None,
        );
        line(
            "micro_std",
            "",
            "",
            a.micro_precision.std,
            a.micro_recall.std,
            a.micro_f1.std,
            None,
        );
        let e = &self.ensembled;
        for f in &e.per_fold {
            line(
                "ensemble",
                &f.fold_label,
                "",
                f.precision,
                f.recall,
                f.f1,
                f.ap,
            );
        }
        line(
            "ensemble_macro",
            "",
            "",
            e.macro_avg.precision,
            e.macro_avg.recall,
            e.macro_avg.f1,
            e.map,
        );
        line(
            "ensemble_micro",
            "",
            "",
            e.micro.precision,
            e.micro.recall,
            e.micro.f1,
            None,
        );
        out
    }
}
