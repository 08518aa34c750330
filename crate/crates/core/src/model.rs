//! One-hidden-layer probabilistic classifier (tanh hidden units, sigmoid
//! output) trained with weighted binary cross-entropy, an L2 penalty, a
//! triangular learning-rate schedule and best-validation-F1 checkpointing.
//!
//! The same model plays both roles of the PU pipeline: `f`, which predicts
//! p(s=1|x), and `g`, which predicts p(y=1|x).

use std::collections::HashMap;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PuDataset, SplitSpec};
use crate::error::{PuError, Result};
use crate::metrics;
use crate::seed;

/// Lower/upper clamp applied to every predicted probability.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Anything that maps a feature vector to a probability in (0,1).
pub trait Scorer {
    fn score(&self, x: &[f64]) -> Result<f64>;
}

/// Closures are scorers; their outputs are clamped like the model's.
impl<F: Fn(&[f64]) -> f64> Scorer for F {
    fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(clamp_probability(self(x)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 0.05,
            warmup_steps: 50,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            hidden_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(PuError::Config(format!(
                "max_lr must be positive, got {}",
                self.max_lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(PuError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0
            || self.batch_size == 0
            || self.hidden_dim == 0
            || self.warmup_steps == 0
        {
            return Err(PuError::Config(
                "epochs, batch_size, hidden_dim and warmup_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Triangular schedule: linear 0 -> `max_lr` over `[0, warmup]`, then linear
/// `max_lr` -> 0 over `[warmup, total]`.
pub fn lr_at_step(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    let warmup = cfg.warmup_steps;
    if warmup >= total_steps {
        return Err(PuError::Config(format!(
            "warmup_steps ({warmup}) must be below the total step count ({total_steps})"
        )));
    }
    if step > total_steps {
        return Err(PuError::Config(format!(
            "step {step} beyond schedule of {total_steps} steps"
        )));
    }
    Ok(if step <= warmup {
        cfg.max_lr * step as f64 / warmup as f64
    } else {
        cfg.max_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

/// One row of a weighted training set. `source` is the id of the sample the
/// row was built from; the two copies of a duplicated unlabelled sample share
/// it and are always placed in the same mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedExample {
    pub features: Vec<f64>,
    pub target: bool,
    pub weight: f64,
    pub source: usize,
}

impl WeightedExample {
    pub fn new(features: Vec<f64>, target: bool, weight: f64, source: usize) -> Self {
        debug_assert!(
            (0.0..=1.0).contains(&weight),
            "weight {weight} outside [0,1]"
        );
        Self {
            features,
            target,
            weight,
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LineageEvent {
    Init {
        seed: u64,
    },
    Train {
        seed: u64,
        epochs: usize,
        best_epoch: usize,
    },
    ReinitHead {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbClassifier {
    input_dim: usize,
    hidden_dim: usize,
    /// hidden x input, row-major
    body_weights: Vec<f64>,
    body_bias: Vec<f64>,
    head_weights: Vec<f64>,
    head_bias: f64,
    lineage: Vec<LineageEvent>,
}

struct Forward {
    hidden: Vec<f64>,
    logit: f64,
}

impl ProbClassifier {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, drawn in the order
    /// body weights, body bias, head weights, head bias.
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let body_bound = 1.0 / (input_dim as f64).sqrt();
        let body_weights = (0..hidden_dim * input_dim)
            .map(|_| rng.random_range(-body_bound..=body_bound))
            .collect();
        let body_bias = (0..hidden_dim)
            .map(|_| rng.random_range(-body_bound..=body_bound))
            .collect();
        let (head_weights, head_bias) = draw_head(hidden_dim, &mut rng);
        Self {
            input_dim,
            hidden_dim,
            body_weights,
            body_bias,
            head_weights,
            head_bias,
            lineage: vec![LineageEvent::Init { seed }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden_dim + 2 * self.hidden_dim + 1
    }

    pub fn lineage(&self) -> &[LineageEvent] {
        &self.lineage
    }

    pub fn body(&self) -> (&[f64], &[f64]) {
        (&self.body_weights, &self.body_bias)
    }

    pub fn head(&self) -> (&[f64], f64) {
        (&self.head_weights, self.head_bias)
    }

    pub fn set_head(&mut self, weights: Vec<f64>, bias: f64) -> Result<()> {
        if weights.len() != self.hidden_dim {
            return Err(PuError::DimensionMismatch {
                expected: self.hidden_dim,
                actual: weights.len(),
            });
        }
        self.head_weights = weights;
        self.head_bias = bias;
        Ok(())
    }

    /// Flat parameters: body weights, body bias, head weights, head bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.body_weights);
        p.extend_from_slice(&self.body_bias);
        p.extend_from_slice(&self.head_weights);
        p.push(self.head_bias);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(PuError::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let (dh, h) = (self.input_dim * self.hidden_dim, self.hidden_dim);
        self.body_weights.copy_from_slice(&params[..dh]);
        self.body_bias.copy_from_slice(&params[dh..dh + h]);
        self.head_weights
            .copy_from_slice(&params[dh + h..dh + 2 * h]);
        self.head_bias = params[dh + 2 * h];
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(PuError::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let hidden: Vec<f64> = self
            .body_weights
            .chunks_exact(self.input_dim)
            .zip(&self.body_bias)
            .map(|(row, b)| (b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh())
            .collect();
        let logit = self.head_bias
            + self
                .head_weights
                .iter()
                .zip(&hidden)
                .map(|(w, a)| w * a)
                .sum::<f64>();
        Forward { hidden, logit }
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.forward(x).logit)
    }

    /// Sigmoid output clamped to `[1e-7, 1 - 1e-7]`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(clamp_probability(sigmoid(self.logit(x)?)))
    }

    /// Head re-drawn from the init distribution under `seed`; body copied.
    pub fn reinit_head(&self, seed: u64) -> ProbClassifier {
        let mut rng = seed::rng(seed);
        let (head_weights, head_bias) = draw_head(self.hidden_dim, &mut rng);
        let mut lineage = self.lineage.clone();
        lineage.push(LineageEvent::ReinitHead { seed });
        ProbClassifier {
            head_weights,
            head_bias,
            lineage,
            ..self.clone()
        }
    }

    /// `scale * sum_rows weight * BCE(sigmoid(logit), target) + weight_decay * |params|^2`
    /// and its gradient with respect to the flat parameter vector.
    pub fn loss_and_gradient(
        &self,
        rows: &[&WeightedExample],
        scale: f64,
        weight_decay: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let mut grad = vec![0.0; self.param_count()];
        let mut data_loss = 0.0;
        {
            let (g_bw, rest) = grad.split_at_mut(d * h);
            let (g_bb, rest) = rest.split_at_mut(h);
            let (g_hw, g_hb) = rest.split_at_mut(h);
            for row in rows {
                self.check_dim(&row.features)?;
                if row.weight == 0.0 {
                    continue;
                }
                let fwd = self.forward(&row.features);
                let t = if row.target { 1.0 } else { 0.0 };
                data_loss += row.weight * (softplus(fwd.logit) - t * fwd.logit);
                let dz = scale * row.weight * (sigmoid(fwd.logit) - t);
                g_hb[0] += dz;
                for i in 0..h {
                    let a = fwd.hidden[i];
                    g_hw[i] += dz * a;
                    let dpre = dz * self.head_weights[i] * (1.0 - a * a);
                    g_bb[i] += dpre;
                    for (g, x) in g_bw[i * d..(i + 1) * d].iter_mut().zip(&row.features) {
                        *g += dpre * x;
                    }
                }
            }
        }
        let params = self.params();
        let mut penalty = 0.0;
        for (g, p) in grad.iter_mut().zip(&params) {
            penalty += p * p;
            *g += 2.0 * weight_decay * p;
        }
        Ok((scale * data_loss + weight_decay * penalty, grad))
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            activation: "tanh".into(),
            output: "sigmoid".into(),
            lineage: self.lineage.clone(),
            body_weights: self.body_weights.clone(),
            body_bias: self.body_bias.clone(),
            head_weights: self.head_weights.clone(),
            head_bias: self.head_bias,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(PuError::Format(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        let (d, h) = (file.input_dim, file.hidden_dim);
        if d == 0
            || h == 0
            || file.body_weights.len() != d * h
            || file.body_bias.len() != h
            || file.head_weights.len() != h
        {
            return Err(PuError::Format(
                "model parameter arrays do not match dims".into(),
            ));
        }
        Ok(Self {
            input_dim: d,
            hidden_dim: h,
            body_weights: file.body_weights,
            body_bias: file.body_bias,
            head_weights: file.head_weights,
            head_bias: file.head_bias,
            lineage: file.lineage,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| PuError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PuError::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Scorer for ProbClassifier {
    fn score(&self, x: &[f64]) -> Result<f64> {
        self.predict_proba(x)
    }
}

fn draw_head(hidden_dim: usize, rng: &mut impl Rng) -> (Vec<f64>, f64) {
    let bound = 1.0 / (hidden_dim as f64).sqrt();
    let weights = (0..hidden_dim)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    (weights, rng.random_range(-bound..=bound))
}

const MODEL_FORMAT: &str = "puckit-model";
const MODEL_VERSION: u32 = 1;

/// On-disk model layout. Floats are written in shortest round-trip form, so
/// parsing restores every parameter bit-for-bit.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    input_dim: usize,
    hidden_dim: usize,
    activation: String,
    output: String,
    lineage: Vec<LineageEvent>,
    body_weights: Vec<f64>,
    body_bias: Vec<f64>,
    head_weights: Vec<f64>,
    head_bias: f64,
}

/// Validation samples used for checkpoint selection; targets are the
/// observed `s` labels.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub ds: &'a PuDataset,
    pub ids: &'a [usize],
}

impl<'a> Validation<'a> {
    pub fn new(ds: &'a PuDataset, split: &'a SplitSpec) -> Self {
        Self {
            ds,
            ids: &split.val_ids,
        }
    }

    /// Whether any validation sample is labelled; without one F1 is flat at 0.
    pub fn has_positive(&self) -> bool {
        self.ids.iter().any(|&id| self.ds.sample(id).labelled)
    }

    /// F1 of `model >= 0.5` against `s`.
    pub fn f1(&self, model: &ProbClassifier) -> Result<f64> {
        let mut preds = Vec::with_capacity(self.ids.len());
        let mut golds = Vec::with_capacity(self.ids.len());
        for &id in self.ids {
            let sample = self.ds.sample(id);
            preds.push(model.predict_proba(&sample.features)? >= 0.5);
            golds.push(sample.labelled);
        }
        Ok(metrics::precision_recall_f1(&preds, &golds)?.f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: ProbClassifier,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Trains a freshly initialized model (init seed `derive(cfg.seed, "init")`).
pub fn train(
    examples: &[WeightedExample],
    val: Validation<'_>,
    cfg: &TrainConfig,
) -> Result<ProbClassifier> {
    let dim = examples
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| PuError::Validation("no training examples".into()))?;
    let init = ProbClassifier::init(dim, cfg.hidden_dim, seed::derive(cfg.seed, "init"));
    Ok(fit(init, examples, val, cfg)?.model)
}

/// Mini-batch gradient descent from `init`.
///
/// Rows are grouped into units by `source`; each epoch shuffles the units
/// (ChaCha8 under `derive(cfg.seed, "shuffle")`) and cuts batches of
/// `batch_size` units. The batch loss is averaged over units. After every
/// epoch the validation F1 is measured and the parameters of the best epoch
/// are returned, earliest epoch on ties. A validation side without labelled
/// samples keeps the last epoch.
pub fn fit(
    init: ProbClassifier,
    examples: &[WeightedExample],
    val: Validation<'_>,
    cfg: &TrainConfig,
) -> Result<Fitted> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(PuError::Validation("no training examples".into()));
    }
    if let Some(bad) = examples.iter().find(|e| e.features.len() != init.input_dim) {
        return Err(PuError::DimensionMismatch {
            expected: init.input_dim,
            actual: bad.features.len(),
        });
    }
    if val.ds.dim() != init.input_dim {
        return Err(PuError::DimensionMismatch {
            expected: init.input_dim,
            actual: val.ds.dim(),
        });
    }
    if let Some(bad) = examples.iter().find(|e| !(0.0..=1.0).contains(&e.weight)) {
        return Err(PuError::Validation(format!(
            "example weight {} outside [0,1]",
            bad.weight
        )));
    }

    let units = group_units(examples);
    let batches_per_epoch = units.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    // validates warmup < total before any work
    lr_at_step(0, total_steps, cfg)?;

    let mut rng = seed::rng(seed::derive(cfg.seed, "shuffle"));
    let mut model = init;
    let mut params = model.params();
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let checkpoint = val.has_positive();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = lr_at_step(step, total_steps, cfg)?;
            let rows: Vec<&WeightedExample> = batch
                .iter()
                .flat_map(|&u| units[u].iter().map(|&r| &examples[r]))
                .collect();
            let (loss, grad) =
                model.loss_and_gradient(&rows, 1.0 / batch.len() as f64, cfg.weight_decay)?;
            if !loss.is_finite() {
                return Err(PuError::NanLoss { step, lr });
            }
            epoch_loss += loss;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            model.set_params(&params)?;
        }
        let val_f1 = val.f1(&model)?;
        let mean_loss = epoch_loss / batches_per_epoch as f64;
        debug!("epoch {epoch}: loss {mean_loss:.6} val_f1 {val_f1:.4}");
        history.push(EpochStats {
            epoch,
            mean_loss,
            val_f1,
        });
        if !checkpoint || best.as_ref().is_none_or(|(f1, _, _)| val_f1 > *f1) {
            best = Some((val_f1, epoch, params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    model.set_params(&best_params)?;
    model.lineage.push(LineageEvent::Train {
        seed: cfg.seed,
        epochs: cfg.epochs,
        best_epoch,
    });
    Ok(Fitted {
        model,
        best_epoch,
        history,
    })
}

/// Row indices grouped by `source`, groups in order of first appearance.
fn group_units(examples: &[WeightedExample]) -> Vec<Vec<usize>> {
    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut units: Vec<Vec<usize>> = Vec::new();
    for (row, e) in examples.iter().enumerate() {
        let slot = *index.entry(e.source).or_insert_with(|| {
            units.push(Vec::new());
            units.len() - 1
        });
        units[slot].push(row);
    }
    units
}
