//! Positive-unlabelled (PU) learning toolkit.
//!
//! Data with labelled positives and unlabelled samples is turned into a
//! classifier of the positive class in three modes:
//!
//! * `pn`: the labelled indicator is taken as the class label;
//! * `pu`: a labelling model `f` estimates the label frequency and a per-sample
//!   posterior `w(x)`; unlabelled samples are duplicated into a weighted
//!   positive and negative copy to train `g`;
//! * `puc`: additionally, the unlabelled samples with the highest `w(x)` are
//!   relabelled positive until the positive fraction reaches the estimated
//!   class prior.
//!
//! The crate also ships SCAR synthetic data, warm-start transfer, seed
//! ensembles and a cross-validation harness.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pu;
pub mod seed;

pub use data::{
    generate_scar, load_dataset, split_train_val, DataFormat, FeatureModel, PuDataset, Sample,
    ScarConfig, SplitSpec,
};
pub use error::{PuError, Result};
pub use eval::{build_fold_plan, run_experiment, EvalReport, Experiment, FoldPlan, FoldSpec};
pub use model::{lr_at_step, ProbClassifier, Scorer, TrainConfig, WeightedExample};
pub use pipeline::{
    ensemble_predict, pretrain_finetune, train_pn, train_pu, train_puc, EnsembleModel, ModeTag,
    PipelineOptions, TrainMode,
};
pub use pu::{
    build_pu_training_set, estimate_c, estimate_expectation, estimate_prior, puc_convert, weight,
    ConvertedDataset, PuEstimates,
};
