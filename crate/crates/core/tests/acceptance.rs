//! Acceptance criteria. Each test prints one `criterion N ... PASS|FAIL`
//! line; run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use puckit::data::{generate_scar, FeatureModel, PuDataset, Sample, ScarConfig};
use puckit::eval::{build_fold_plan, run_experiment, Experiment, FoldSpec};
use puckit::metrics::{average_precision, mean_ap, precision_recall_f1, rank_by_score};
use puckit::model::{ProbClassifier, TrainConfig, WeightedExample};
use puckit::pipeline::{pretrain_finetune, run_mode, ModeTag, PipelineOptions, TrainMode};
use puckit::pu::{estimate_expectation, puc_convert};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    println!(
        "criterion {n:>2} {name:<28} {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn scar(n: usize, prior: f64, label_freq: f64, gap: f64, seed: u64) -> ScarConfig {
    ScarConfig {
        n,
        prior,
        label_freq,
        feature_model: FeatureModel::separated(2, gap),
        seed,
        groups: None,
    }
}

const GAP: f64 = 4.0;

fn bayes_error(model: &FeatureModel) -> f64 {
    Normal::new(0.0, 1.0)
        .unwrap()
        .cdf(-model.separation() / 2.0)
}

/// Setting shared by the c and prior recovery criteria.
fn recovery_runs() -> Vec<(f64, f64)> {
    (0..10u64)
        .map(|seed| {
            let ds = generate_scar(&scar(5000, 0.5, 0.7, GAP, 1000 + seed)).unwrap();
            let cfg = TrainConfig::default().with_seed(seed);
            let out = run_mode(&ds, ModeTag::Pu, &cfg, &PipelineOptions::default(), None).unwrap();
            let est = out.estimates.unwrap();
            (est.c, est.prior)
        })
        .collect()
}

#[test]
fn criterion_01_02_label_frequency_and_prior_recovery() {
    let model = FeatureModel::separated(2, GAP);
    let bayes = bayes_error(&model);
    assert!(bayes < 0.01, "bayes error {bayes}");

    let start = Instant::now();
    let runs = recovery_runs();
    let secs = start.elapsed().as_secs_f64();

    let c_ok = runs
        .iter()
        .filter(|(c, _)| (0.60..=0.80).contains(c))
        .count();
    let cs: Vec<String> = runs.iter().map(|(c, _)| format!("{c:.3}")).collect();
    let prior_ok = runs.iter().filter(|(_, p)| (p - 0.5).abs() <= 0.05).count();
    let priors: Vec<String> = runs.iter().map(|(_, p)| format!("{p:.3}")).collect();

    let c_pass = c_ok >= 9 && secs < 120.0;
    let p_pass = prior_ok >= 9;
    println!(
        "criterion  1 c recovery                   {} ({c_ok}/10 in [0.60,0.80], c = [{}], bayes error {bayes:.4}, {secs:.1}s)",
        if c_pass { "PASS" } else { "FAIL" },
        cs.join(", ")
    );
    println!(
        "criterion  2 prior recovery               {} ({prior_ok}/10 within 0.05, prior = [{}])",
        if p_pass { "PASS" } else { "FAIL" },
        priors.join(", ")
    );
    assert!(c_pass && p_pass);
}

/// Dataset whose feature is the sample id, so a score table can act as f.
fn indexed_dataset(labelled: &[bool]) -> PuDataset {
    PuDataset::new(
        labelled
            .iter()
            .enumerate()
            .map(|(id, &l)| Sample {
                id,
                features: vec![id as f64],
                labelled: l,
                truth: if l { Some(true) } else { None },
                group: None,
            })
            .collect(),
    )
    .unwrap()
}

fn oracle_weight(p: f64, c: f64) -> f64 {
    ((1.0 - c) / c * (p / (1.0 - p))).clamp(0.0, 1.0)
}

#[test]
fn criterion_03_expectation_estimator_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=10usize);
        let labelled: Vec<bool> = (0..k).map(|_| rng.random_bool(0.4)).collect();
        let ds = indexed_dataset(&labelled);
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.99)).collect();
        let c = rng.random_range(0.05..=1.0);
        let h_pos: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let h_neg: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();

        let f = |x: &[f64]| scores[x[0] as usize];
        let h = |x: &[f64], y: bool| {
            let i = x[0] as usize;
            if y {
                h_pos[i]
            } else {
                h_neg[i]
            }
        };
        let got = estimate_expectation(h, &ds, &f, c).unwrap();

        // enumerate the weighted copies explicitly
        let mut copies: Vec<(usize, bool, f64)> = Vec::new();
        for i in 0..k {
            if labelled[i] {
                copies.push((i, true, 1.0));
            } else {
                let w = oracle_weight(scores[i], c);
                copies.push((i, true, w));
                copies.push((i, false, 1.0 - w));
            }
        }
        let brute: f64 = copies
            .iter()
            .map(|&(i, y, w)| w * if y { h_pos[i] } else { h_neg[i] })
            .sum::<f64>()
            / k as f64;
        worst = worst.max((got - brute).abs());
    }
    verdict(
        3,
        "expectation estimator",
        worst < 1e-12,
        format!("max |diff| = {worst:e}"),
    );
}

/// Independent trace of the conversion: returns converted ids in order.
fn reference_conversion(labelled: &[bool], scores: &[f64], c: f64) -> (Vec<usize>, f64) {
    let k = labelled.len();
    let mut unl: Vec<(usize, f64)> = (0..k)
        .filter(|&i| !labelled[i])
        .map(|i| (i, (1.0 - c) / c * (scores[i] / (1.0 - scores[i]))))
        .collect();
    let mut w_sum = 0.0;
    for &(_, raw) in &unl {
        w_sum += raw.clamp(0.0, 1.0);
    }
    let prior = (labelled.iter().filter(|&&l| l).count() as f64 + w_sum) / k as f64;
    unl.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut positives = labelled.iter().filter(|&&l| l).count();
    let mut converted = Vec::new();
    for (id, _) in unl {
        if positives as f64 / k as f64 >= prior {
            break;
        }
        converted.push(id);
        positives += 1;
    }
    (converted, prior)
}

#[test]
fn criterion_04_conversion_matches_reference_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut non_minimal = 0;
    for case in 0..1000 {
        let k = rng.random_range(1..=20usize);
        let labelled: Vec<bool> = (0..k).map(|_| rng.random_bool(0.3)).collect();
        // half the cases draw scores from a coarse grid to force ties
        let scores: Vec<f64> = (0..k)
            .map(|_| {
                if case % 2 == 0 {
                    rng.random_range(1..8) as f64 / 8.0
                } else {
                    rng.random_range(0.01..0.99)
                }
            })
            .collect();
        let c = if case % 4 == 0 {
            0.5
        } else {
            rng.random_range(0.1..=1.0)
        };
        let ds = indexed_dataset(&labelled);
        let f = |x: &[f64]| scores[x[0] as usize];
        let got = puc_convert(&ds, &f, c).unwrap();
        let (want, prior) = reference_conversion(&labelled, &scores, c);
        if got.converted_ids != want || got.prior != prior {
            mismatches += 1;
        }
        let base = labelled.iter().filter(|&&l| l).count();
        let n = got.converted_ids.len();
        if n > 0 && (base + n - 1) as f64 / k as f64 >= prior {
            non_minimal += 1;
        }
        let expect_labels: Vec<bool> = (0..k).map(|i| labelled[i] || want.contains(&i)).collect();
        if got.labels != expect_labels {
            mismatches += 1;
        }
    }
    verdict(
        4,
        "conversion oracle",
        mismatches == 0 && non_minimal == 0,
        format!("{mismatches} mismatches, {non_minimal} non-minimal, 1000 cases"),
    );
}

#[test]
fn criterion_05_gradient_check() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for t in 0..100 {
        let d = rng.random_range(1..=5usize);
        let h = rng.random_range(1..=8usize);
        let model = ProbClassifier::init(d, h, 500 + t);
        let rows: Vec<WeightedExample> = (0..rng.random_range(1..=12usize))
            .map(|i| {
                WeightedExample::new(
                    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    rng.random_bool(0.5),
                    rng.random_range(0.0..=1.0),
                    i,
                )
            })
            .collect();
        let refs: Vec<&WeightedExample> = rows.iter().collect();
        let wd = if t % 3 == 0 {
            0.0
        } else {
            rng.random_range(0.0..0.1)
        };
        let scale = 1.0 / rows.len() as f64;

        let (_, analytic) = model.loss_and_gradient(&refs, scale, wd).unwrap();
        let theta = model.params();
        let mut probe = model.clone();
        let eps = 1e-5;
        let numeric: Vec<f64> = (0..theta.len())
            .map(|j| {
                let mut p = theta.clone();
                p[j] += eps;
                probe.set_params(&p).unwrap();
                let up = probe.loss_and_gradient(&refs, scale, wd).unwrap().0;
                p[j] -= 2.0 * eps;
                probe.set_params(&p).unwrap();
                let down = probe.loss_and_gradient(&refs, scale, wd).unwrap().0;
                (up - down) / (2.0 * eps)
            })
            .collect();
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(diff / denom);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "gradient check",
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:e}, {secs:.2}s"),
    );
}

#[test]
fn criterion_06_metric_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=30usize);
        let preds: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let golds: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let got = precision_recall_f1(&preds, &golds).unwrap();

        let tp = (0..n).filter(|&i| preds[i] && golds[i]).count() as f64;
        let predicted = preds.iter().filter(|&&p| p).count() as f64;
        let actual = golds.iter().filter(|&&g| g).count() as f64;
        let p = if predicted == 0.0 {
            0.0
        } else {
            tp / predicted
        };
        let r = if actual == 0.0 { 0.0 } else { tp / actual };
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        if got.precision != p || got.recall != r || got.f1 != f {
            bad += 1;
        }

        if actual > 0.0 {
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            // insertion sort by descending score keeps equal scores in index order
            let mut order: Vec<usize> = Vec::new();
            for i in 0..n {
                let at = order
                    .iter()
                    .position(|&j| scores[j] < scores[i])
                    .unwrap_or(order.len());
                order.insert(at, i);
            }
            let ranked: Vec<bool> = order.iter().map(|&i| golds[i]).collect();
            if rank_by_score(&scores, &golds) != ranked {
                bad += 1;
            }
            // precision at every positive rank, counted from scratch
            let mut sum = 0.0;
            for i in 0..n {
                if ranked[i] {
                    let hits = ranked[..=i].iter().filter(|&&g| g).count();
                    sum += hits as f64 / (i + 1) as f64;
                }
            }
            if average_precision(&ranked).unwrap() != sum / actual {
                bad += 1;
            }
        }
    }
    let queries: Vec<Vec<bool>> = (0..50)
        .map(|_| {
            let mut q: Vec<bool> = (0..10).map(|_| rng.random_bool(0.3)).collect();
            q[rng.random_range(0..10)] = true;
            q
        })
        .collect();
    let brute_map = queries
        .iter()
        .map(|q| average_precision(q).unwrap())
        .sum::<f64>()
        / queries.len() as f64;
    if mean_ap(&queries).unwrap() != brute_map {
        bad += 1;
    }
    let worked = average_precision(&[true, false, true]).unwrap();
    verdict(
        6,
        "metric exactness",
        bad == 0 && (worked - 5.0 / 6.0).abs() < 1e-15,
        format!("{bad} mismatches in 1000 cases, worked AP = {worked}"),
    );
}

#[test]
fn criterion_07_mode_collapse_at_full_label_frequency() {
    let ds = generate_scar(&scar(800, 0.5, 1.0, GAP, 70)).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    }
    .with_seed(7);
    let opts = PipelineOptions {
        label_freq: Some(1.0),
        ..PipelineOptions::default()
    };
    let params: Vec<Vec<u64>> = [ModeTag::Pn, ModeTag::Pu, ModeTag::Puc]
        .iter()
        .map(|&m| {
            run_mode(&ds, m, &cfg, &opts, None)
                .unwrap()
                .g
                .params()
                .iter()
                .map(|p| p.to_bits())
                .collect()
        })
        .collect();
    let same = params[0] == params[1] && params[1] == params[2];
    verdict(
        7,
        "mode collapse",
        same,
        format!("{} parameters compared bitwise", params[0].len()),
    );
}

#[test]
fn criterion_08_conversion_gains_recall() {
    let start = Instant::now();
    let mut ds_cfg = scar(5000, 0.5, 0.5, GAP, 80);
    ds_cfg.groups = None;
    let ds = generate_scar(&ds_cfg).unwrap();
    let plan = build_fold_plan(&ds, FoldSpec::Kfold { k: 5 }, 8).unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let train = TrainConfig::default();
    let opts = PipelineOptions::default();
    let mut results = BTreeMap::new();
    for tag in [ModeTag::Pn, ModeTag::Puc] {
        let mode = TrainMode::plain(tag);
        let exp = Experiment {
            mode: &mode,
            train: &train,
            opts: &opts,
            seeds: &seeds,
            ranking: false,
            jobs: None,
        };
        let report = run_experiment(&ds, &plan, &exp).unwrap();
        results.insert(
            tag.to_string(),
            (
                report.aggregate.precision.mean,
                report.aggregate.recall.mean,
            ),
        );
    }
    let (pn_p, pn_r) = results["pn"];
    let (puc_p, puc_r) = results["puc"];
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        "recall gain",
        puc_r >= pn_r + 0.05 && pn_p - puc_p <= 0.05 && secs < 600.0,
        format!(
            "recall pn {pn_r:.4} puc {puc_r:.4}, precision pn {pn_p:.4} puc {puc_p:.4}, {secs:.1}s"
        ),
    );
}

fn test_f1(model: &ProbClassifier, test: &PuDataset) -> f64 {
    let preds: Vec<bool> = test
        .samples()
        .iter()
        .map(|s| model.predict_proba(&s.features).unwrap() >= 0.5)
        .collect();
    let golds: Vec<bool> = test.samples().iter().map(|s| s.truth.unwrap()).collect();
    precision_recall_f1(&preds, &golds).unwrap().f1
}

#[test]
fn criterion_09_transfer_warm_start() {
    let cfg = TrainConfig::default();
    let opts = PipelineOptions::default();
    let test = generate_scar(&scar(2000, 0.5, 0.5, GAP, 999)).unwrap();
    let mut body_exact = true;
    let mut head_differs = true;
    let mut transfer = Vec::new();
    let mut scratch = Vec::new();
    for seed in 0..10u64 {
        let source = generate_scar(&scar(3000, 0.5, 0.5, GAP, 900 + seed)).unwrap();
        let target = generate_scar(&scar(1000, 0.5, 0.5, GAP, 950 + seed)).unwrap();
        let run_cfg = cfg.with_seed(seed);
        let out = pretrain_finetune(
            &source,
            &target,
            ModeTag::Puc,
            ModeTag::Puc,
            &run_cfg,
            &opts,
        )
        .unwrap();
        body_exact &= out.initial.body() == out.source.g.body();
        head_differs &= out.initial.head() != out.source.g.head();
        transfer.push(test_f1(&out.target.g, &test));
        let alone = run_mode(&target, ModeTag::Puc, &run_cfg, &opts, None).unwrap();
        scratch.push(test_f1(&alone.g, &test));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (t, s) = (mean(&transfer), mean(&scratch));
    verdict(
        9,
        "transfer warm start",
        body_exact && head_differs && t >= s - 0.02,
        format!("body exact {body_exact}, head differs {head_differs}, F1 transfer {t:.4} vs target-only {s:.4}"),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                files.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

fn manifest_without_timestamp(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("created_unix");
    v
}

fn puckit(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_puckit"))
        .args(args)
        .status()
        .unwrap();
    assert!(status.success(), "puckit {args:?} failed: {status}");
}

#[test]
fn criterion_10_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let gen_cfg = root.join("gen.json");
    let mut cfg = scar(600, 0.5, 0.5, 3.0, 10);
    cfg.groups = Some(5);
    fs::write(&gen_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    let train = root.join("train");
    let eval = root.join("eval");
    let csv = data.join("dataset.csv");

    let run_all = |jobs: &str| {
        puckit(&["generate", "--config", &s(&gen_cfg), "--out", &s(&data)]);
        puckit(&[
            "train",
            "--data",
            &s(&csv),
            "--mode",
            "puc",
            "--seeds",
            "1,2",
            "--jobs",
            jobs,
            "--out",
            &s(&train),
        ]);
        puckit(&[
            "eval",
            "--data",
            &s(&csv),
            "--mode",
            "puc",
            "--seeds",
            "0..3",
            "--folds",
            "group",
            "--ranking",
            "--jobs",
            jobs,
            "--out",
            &s(&eval),
        ]);
        (
            [snapshot(&data), snapshot(&train), snapshot(&eval)],
            [
                manifest_without_timestamp(&train.join("manifest.json")),
                manifest_without_timestamp(&eval.join("manifest.json")),
            ],
        )
    };
    let (files_a, manifests_a) = run_all("1");
    let (files_b, manifests_b) = run_all("4");
    let n_files: usize = files_a.iter().map(|m| m.len()).sum();
    let files_same = files_a == files_b;
    let jobs_recorded = manifests_a[0].get("config").unwrap().get("jobs")
        != manifests_b[0].get("config").unwrap().get("jobs");
    // manifests record --jobs; everything else must agree
    let strip_jobs = |mut v: serde_json::Value| {
        v["config"].as_object_mut().unwrap().remove("jobs");
        v
    };
    let manifests_equal = manifests_a
        .into_iter()
        .zip(manifests_b)
        .all(|(a, b)| strip_jobs(a) == strip_jobs(b));
    verdict(
        10,
        "cli determinism",
        files_same && jobs_recorded && manifests_equal,
        format!("{n_files} files byte-identical across reruns with --jobs 1 and 4: {files_same}; manifests equal modulo timestamp: {manifests_equal}"),
    );
}
