//! Batch front end: `generate`, `train` and `eval`.
//!
//! Each command reads one JSON config; command-line flags override its
//! fields. Output files are byte-identical across reruns, except the
//! `created_unix` field of `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_scar, load_dataset, write_dataset, DataFormat, PuDataset, ScarConfig, SplitSpec,
};
use crate::error::{PuError, Result};
use crate::eval::{
    assemble_report, build_fold_plan, mode_label, run_experiment, EvalReport, Experiment, FoldPlan,
    FoldSpec, RunPredictions,
};
use crate::model::{ProbClassifier, TrainConfig};
use crate::pipeline::{run_train_mode, ModeTag, PipelineOptions, TrainMode, TransferSource};
use crate::pu::{ConvertedDataset, PuEstimates};
use crate::seed;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "puckit",
    version,
    about = "Positive-unlabelled learning toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a SCAR dataset and its truth sidecar.
    Generate(CommonFlags),
    /// Train g (and f) per seed.
    Train(CommonFlags),
    /// Cross-validate a mode or score pre-trained models.
    Eval(CommonFlags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file (.csv or .jsonl).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ModeTag>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Comma-separated seeds; `a..b` expands to a half-open range.
    #[arg(long, value_parser = parse_seed_list)]
    pub seeds: Option<SeedList>,
    /// `group` or `kfold:K`.
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub ranking: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<ModeTag, String> {
    s.parse().map_err(|e: PuError| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(s: &str) -> std::result::Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a
                .trim()
                .parse()
                .map_err(|_| format!("bad seed range {part:?}"))?;
            let b: u64 = b
                .trim()
                .parse()
                .map_err(|_| format!("bad seed range {part:?}"))?;
            seeds.extend(a..b);
        } else {
            seeds.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?);
        }
    }
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(seeds)
}

/// Config of `train` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub mode: Option<ModeTag>,
    pub train: TrainConfig,
    pub pipeline: PipelineOptions,
    pub seeds: Vec<u64>,
    pub pretrained: Option<PathBuf>,
    /// Mode the pretrained model was trained in; informational.
    pub pretrained_mode: Option<ModeTag>,
    pub folds: String,
    pub ranking: bool,
    /// Pre-trained g models to score instead of training (`eval` only).
    pub models: Option<Vec<PathBuf>>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            mode: None,
            train: TrainConfig::default(),
            pipeline: PipelineOptions::default(),
            seeds: vec![0],
            pretrained: None,
            pretrained_mode: None,
            folds: "kfold:5".into(),
            ranking: false,
            models: None,
            jobs: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn apply(&mut self, flags: &CommonFlags) {
        if let Some(p) = &flags.data {
            self.dataset = Some(p.clone());
        }
        if let Some(m) = flags.mode {
            self.mode = Some(m);
        }
        if let Some(p) = &flags.pretrained {
            self.pretrained = Some(p.clone());
        }
        if let Some(s) = &flags.seeds {
            self.seeds = s.0.clone();
        }
        if let Some(f) = &flags.folds {
            self.folds = f.clone();
        }
        if flags.ranking {
            self.ranking = true;
        }
        if let Some(j) = flags.jobs {
            self.jobs = Some(j);
        }
        if let Some(o) = &flags.out {
            self.out = Some(o.clone());
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self, needs_mode: bool) -> Result<()> {
        let dataset = self.dataset.as_ref().ok_or_else(|| {
            PuError::Config("no dataset given (config `dataset` or --data)".into())
        })?;
        require_file(dataset)?;
        DataFormat::from_path(dataset).map_err(|e| PuError::Config(e.to_string()))?;
        if self.out.is_none() {
            return Err(PuError::Config(
                "no output directory (config `out` or --out)".into(),
            ));
        }
        if needs_mode && self.mode.is_none() {
            return Err(PuError::Config(
                "no mode given (config `mode` or --mode)".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(PuError::Config("seed list is empty".into()));
        }
        if let Some(p) = &self.pretrained {
            require_file(p)?;
        }
        if let Some(models) = &self.models {
            if models.is_empty() {
                return Err(PuError::Config("model list is empty".into()));
            }
            for p in models {
                require_file(p)?;
            }
        }
        if self.jobs == Some(0) {
            return Err(PuError::Config("--jobs must be at least 1".into()));
        }
        let r = self.pipeline.split_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(PuError::Config(format!("split ratio {r} not in (0,1)")));
        }
        if let Some(c) = self.pipeline.label_freq {
            if !(c > 0.0 && c <= 1.0) {
                return Err(PuError::Config(format!("label_freq {c} not in (0,1]")));
            }
        }
        self.train.validate()
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PuError::Config(format!("no such file: {}", path.display())))
    }
}

/// 0 ok, 2 config validation, 3 model/data incompatibility, 4 missing labels,
/// 1 anything else.
pub fn exit_code(err: &PuError) -> i32 {
    match err {
        PuError::Config(_) => 2,
        PuError::DimensionMismatch { .. } => 3,
        PuError::MissingTruth(_) | PuError::MissingGroups(_) | PuError::NoPositives(_) => 4,
        _ => 1,
    }
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| PuError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| PuError::Config(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| PuError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| PuError::io(path, e))
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Hex SHA-256 of a file's bytes.
pub fn fingerprint(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PuError::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn with_pool<T: Send>(jobs: Option<usize>, work: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PuError::Config(format!("thread pool: {e}")))?
            .install(work)),
        None => Ok(work()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(flags) => cmd_generate(&flags),
        Command::Train(flags) => cmd_train(&flags),
        Command::Eval(flags) => cmd_eval(&flags),
    }
}

/// Sidecar written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateTruth {
    pub prior: f64,
    pub label_freq: f64,
    pub config: ScarConfig,
    pub samples: usize,
    pub positives: usize,
    pub labelled: usize,
}

pub const DATASET_FILE: &str = "dataset.csv";
pub const TRUTH_FILE: &str = "truth.json";

pub fn cmd_generate(flags: &CommonFlags) -> Result<()> {
    let path = flags
        .config
        .as_deref()
        .ok_or_else(|| PuError::Config("generate needs --config".into()))?;
    let mut cfg: ScarConfig = {
        let text = fs::read_to_string(path)
            .map_err(|e| PuError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PuError::Config(format!("invalid config {}: {e}", path.display())))?
    };
    if let Some(seeds) = &flags.seeds {
        match seeds.0.as_slice() {
            [s] => cfg.seed = *s,
            _ => return Err(PuError::Config("generate takes a single seed".into())),
        }
    }
    cfg.validate()?;
    let out = flags.out.clone().unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out)?;

    let ds = generate_scar(&cfg)?;
    write_dataset(&ds, out.join(DATASET_FILE), DataFormat::Csv)?;
    let truth = GenerateTruth {
        prior: cfg.prior,
        label_freq: cfg.label_freq,
        samples: ds.len(),
        positives: ds
            .samples()
            .iter()
            .filter(|s| s.truth == Some(true))
            .count(),
        labelled: ds.labelled_count(),
        config: cfg,
    };
    write_file(&out.join(TRUTH_FILE), to_json_pretty(&truth)?)?;
    info!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

/// Per-seed estimates file of `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatesReport {
    pub mode: ModeTag,
    pub seed: u64,
    pub split: SplitSpec,
    pub estimates: Option<PuEstimates>,
    pub conversion: Option<ConvertedDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub model_g: PathBuf,
    pub model_f: Option<PathBuf>,
    pub estimates: PathBuf,
    pub c: Option<f64>,
    pub prior: Option<f64>,
    pub converted: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub mode: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub dataset: FileRef,
    pub pretrained: Option<FileRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<FileRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<TrainRun>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<PathBuf>,
    /// The only field that differs between identical reruns.
    pub created_unix: u64,
}

fn load_run_config(flags: &CommonFlags) -> Result<RunConfig> {
    let mut cfg: RunConfig = read_config(flags.config.as_deref())?;
    cfg.apply(flags);
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<PuDataset> {
    load_dataset(path, DataFormat::from_path(path)?)
}

fn train_mode(cfg: &RunConfig, tag: ModeTag) -> Result<TrainMode> {
    let transfer = match &cfg.pretrained {
        Some(p) => Some(TransferSource {
            model: ProbClassifier::load(p)?,
            mode: cfg.pretrained_mode,
        }),
        None => None,
    };
    Ok(TrainMode { tag, transfer })
}

fn file_ref(path: &Path) -> Result<FileRef> {
    Ok(FileRef {
        path: path.to_path_buf(),
        sha256: fingerprint(path)?,
    })
}

pub fn cmd_train(flags: &CommonFlags) -> Result<()> {
    let cfg = load_run_config(flags)?;
    cfg.validate(true)?;
    let tag = cfg.mode.expect("validated");
    let data_path = cfg.dataset.clone().expect("validated");
    let out = cfg.out.clone().expect("validated");
    let ds = load_data(&data_path)?;
    let mode = train_mode(&cfg, tag)?;
    if let Some(src) = &mode.transfer {
        if src.model.input_dim() != ds.dim() {
            return Err(PuError::DimensionMismatch {
                expected: src.model.input_dim(),
                actual: ds.dim(),
            });
        }
    }
    create_dir(&out)?;

    let outcomes = with_pool(cfg.jobs, || {
        cfg.seeds
            .par_iter()
            .map(|&s| run_train_mode(&ds, &mode, &cfg.train.with_seed(s), &cfg.pipeline))
            .collect::<Result<Vec<_>>>()
    })??;

    let mut runs = Vec::with_capacity(outcomes.len());
    for (&s, outcome) in cfg.seeds.iter().zip(&outcomes) {
        let dir = out.join(format!("seed-{s}"));
        create_dir(&dir)?;
        let g_path = dir.join("model_g.json");
        outcome.g.save(&g_path)?;
        let f_path = match &outcome.f {
            Some(f) => {
                let p = dir.join("model_f.json");
                f.save(&p)?;
                Some(p)
            }
            None => None,
        };
        let est_path = dir.join("estimates.json");
        let report = EstimatesReport {
            mode: tag,
            seed: s,
            split: outcome.split.clone(),
            estimates: outcome.estimates.clone(),
            conversion: outcome.conversion.clone(),
        };
        write_file(&est_path, to_json_pretty(&report)?)?;
        runs.push(TrainRun {
            seed: s,
            model_g: g_path,
            model_f: f_path,
            estimates: est_path,
            c: outcome.estimates.as_ref().map(|e| e.c),
            prior: outcome.estimates.as_ref().map(|e| e.prior),
            converted: outcome.conversion.as_ref().map(|c| c.converted_ids.len()),
        });
        info!("seed {s}: model written to {}", dir.display());
    }

    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        command: "train".into(),
        mode: mode_label(&mode),
        seeds: cfg.seeds.clone(),
        dataset: file_ref(&data_path)?,
        pretrained: cfg.pretrained.as_deref().map(file_ref).transpose()?,
        models: Vec::new(),
        runs,
        reports: Vec::new(),
        config: cfg,
        created_unix: unix_now(),
    };
    write_file(&out.join("manifest.json"), to_json_pretty(&manifest)?)
}

pub fn cmd_eval(flags: &CommonFlags) -> Result<()> {
    let cfg = load_run_config(flags)?;
    let scoring_models = cfg.models.is_some();
    cfg.validate(!scoring_models)?;
    let data_path = cfg.dataset.clone().expect("validated");
    let out = cfg.out.clone().expect("validated");
    let spec: FoldSpec = cfg.folds.parse()?;
    let ds = load_data(&data_path)?;
    let missing = ds.missing_truth();
    if !missing.is_empty() {
        return Err(PuError::MissingTruth(missing));
    }

    let (report, label, models) = match &cfg.models {
        Some(paths) => {
            let (report, models) = score_models(&ds, paths, cfg.ranking)?;
            (report, "models".to_string(), models)
        }
        None => {
            let mode = train_mode(&cfg, cfg.mode.expect("validated"))?;
            let plan = build_fold_plan(&ds, spec, seed::derive(cfg.seeds[0], "folds"))?;
            let exp = Experiment {
                mode: &mode,
                train: &cfg.train,
                opts: &cfg.pipeline,
                seeds: &cfg.seeds,
                ranking: cfg.ranking,
                jobs: cfg.jobs,
            };
            (
                run_experiment(&ds, &plan, &exp)?,
                mode_label(&mode),
                Vec::new(),
            )
        }
    };

    create_dir(&out)?;
    let json_path = out.join("report.json");
    let csv_path = out.join("report.csv");
    write_file(&json_path, report.to_json())?;
    write_file(&csv_path, report.to_csv())?;
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        command: "eval".into(),
        mode: label,
        seeds: cfg.seeds.clone(),
        dataset: file_ref(&data_path)?,
        pretrained: cfg.pretrained.as_deref().map(file_ref).transpose()?,
        models,
        runs: Vec::new(),
        reports: vec![json_path, csv_path],
        config: cfg,
        created_unix: unix_now(),
    };
    write_file(&out.join("manifest.json"), to_json_pretty(&manifest)?)
}

/// Scores every model on the whole dataset as one held-out fold; model `i`
/// appears as seed `i` in the report.
fn score_models(
    ds: &PuDataset,
    paths: &[PathBuf],
    ranking: bool,
) -> Result<(EvalReport, Vec<FileRef>)> {
    let plan = FoldPlan::holdout(Vec::new(), (0..ds.len()).collect());
    let mut runs = Vec::with_capacity(paths.len());
    let mut refs = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let model = ProbClassifier::load(p)?;
        if model.input_dim() != ds.dim() {
            return Err(PuError::DimensionMismatch {
                expected: model.input_dim(),
                actual: ds.dim(),
            });
        }
        let probs = ds
            .samples()
            .iter()
            .map(|s| model.predict_proba(&s.features))
            .collect::<Result<Vec<_>>>()?;
        runs.push(RunPredictions {
            fold: 0,
            seed: i as u64,
            probs,
        });
        refs.push(file_ref(p)?);
    }
    let seeds: Vec<u64> = (0..paths.len() as u64).collect();
    Ok((
        assemble_report(ds, &plan, "models", &seeds, &runs, ranking)?,
        refs,
    ))
}
