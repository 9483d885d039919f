//! End-to-end runs: generate, train, evaluate and write artifacts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::detector::{save_checkpoint, DetectorError, ReportNodes};
use crate::evaluator::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::synthworld::{generate_dataset, save_dataset, Dataset, Supervision, WorldConfig, WorldError};
use crate::taxonomy::{Taxonomy, TaxonomyError};
use crate::trainer::{log_to_csv, train, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the classifier is built over the categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Leaf-only classifier; ancestors are scored by summing their leaves.
    Aggregated,
    /// One softmax class per leaf and per labelled ancestor.
    Flat,
}

/// Categories carrying a training label that are not leaves of `truth`.
pub fn labelled_ancestors(dataset: &Dataset, truth: &Taxonomy) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for im in &dataset.train {
        let labels: Vec<&str> = match &im.supervision {
            Supervision::BoxLevel(anns) => anns.iter().map(|a| a.category.as_str()).collect(),
            Supervision::ImageLevel(c) => vec![c.as_str()],
        };
        for c in labels {
            if truth.node(c).is_some_and(|v| !truth.is_leaf(v)) {
                out.insert(c.to_string());
            }
        }
    }
    out
}

/// Classifier taxonomy for a variant.
pub fn model_taxonomy(
    dataset: &Dataset,
    truth: &Taxonomy,
    variant: Variant,
) -> Result<Taxonomy, TaxonomyError> {
    match variant {
        Variant::Aggregated => Ok(truth.clone()),
        Variant::Flat => {
            let mut classes: Vec<String> = truth.leaf_names().iter().map(|s| s.to_string()).collect();
            classes.extend(labelled_ancestors(dataset, truth));
            truth.flattened(&classes)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub model_taxonomy: Taxonomy,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains one variant on `dataset` and evaluates it on `dataset.eval`.
/// Evaluated categories default to the truth leaves plus every labelled
/// ancestor.
pub fn run_experiment(
    dataset: &Dataset,
    truth: &Taxonomy,
    variant: Variant,
    train_config: &TrainConfig,
    eval_config: &EvalConfig,
) -> Result<Experiment, PipelineError> {
    let model_taxonomy = model_taxonomy(dataset, truth, variant)?;
    let outcome = train(dataset, &model_taxonomy, train_config)?;
    let mut eval_config = eval_config.clone();
    if eval_config.categories.is_none() {
        let mut cats: Vec<String> = truth.leaf_names().iter().map(|s| s.to_string()).collect();
        cats.extend(labelled_ancestors(dataset, truth));
        eval_config.categories = Some(cats);
    }
    eval_config.report = match variant {
        Variant::Aggregated => ReportNodes::AllNodes,
        Variant::Flat => ReportNodes::LeafOnly,
    };
    let report = evaluate(
        &outcome.params,
        &model_taxonomy,
        truth,
        &dataset.eval,
        &dataset.category_splits(truth),
        &train_config.detector,
        &eval_config,
    )?;
    Ok(Experiment {
        model_taxonomy,
        outcome,
        report,
    })
}

/// Fully supervised reference: the same world with every category boxed and
/// no image-level flow.
pub fn oracle_configs(world: &WorldConfig, train_config: &TrainConfig) -> (WorldConfig, TrainConfig) {
    let w = world.fully_supervised();
    let t = TrainConfig {
        batch_box: train_config.batch_box + train_config.batch_img,
        batch_img: 0,
        ..train_config.clone()
    };
    (w, t)
}

/// Settings of the `demo` run.
pub fn demo_configs(seed: u64) -> (WorldConfig, TrainConfig) {
    let world = WorldConfig {
        seed,
        ..WorldConfig::default()
    };
    let train = TrainConfig {
        seed,
        momentum: 0.9,
        total_epochs: 12,
        lr_drop_epoch: 9,
        ..TrainConfig::default()
    };
    (world, train)
}

/// Paths written by `write_run`.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
    pub report_dir: PathBuf,
}

/// Writes the epoch checkpoints, the training log and the report under `out`.
pub fn write_run(
    out: &Path,
    model_taxonomy: &Taxonomy,
    outcome: &TrainOutcome,
    report: Option<&EvalReport>,
) -> Result<RunArtifacts, PipelineError> {
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut checkpoints = Vec::new();
    for (e, p) in outcome.epoch_params.iter().enumerate() {
        let path = ckpt_dir.join(format!("epoch{}.ckpt", e + 1));
        save_checkpoint(p, model_taxonomy, &path)?;
        checkpoints.push(path);
    }
    let log = out.join("log.csv");
    std::fs::write(&log, log_to_csv(&outcome.log))?;
    let report_dir = out.join("report");
    if let Some(r) = report {
        r.write(&report_dir)?;
    }
    Ok(RunArtifacts {
        checkpoints,
        log,
        report_dir,
    })
}

#[derive(Debug, Clone)]
pub struct DemoResult {
    pub report: EvalReport,
    pub artifacts: RunArtifacts,
    pub stats: crate::trainer::TrainStats,
}

/// gen-data, train and eval with the demo settings, writing everything
/// under `out`.
pub fn run_demo(seed: u64, out: &Path) -> Result<DemoResult, PipelineError> {
    let (world, train_config) = demo_configs(seed);
    let truth = world.validate()?;
    let dataset = generate_dataset(&world)?;
    save_dataset(&dataset, out.join("data"))?;
    std::fs::write(out.join("taxonomy.tree"), truth.to_text())?;
    let exp = run_experiment(
        &dataset,
        &truth,
        Variant::Aggregated,
        &train_config,
        &EvalConfig::default(),
    )?;
    let artifacts = write_run(out, &exp.model_taxonomy, &exp.outcome, Some(&exp.report))?;
    Ok(DemoResult {
        report: exp.report,
        artifacts,
        stats: exp.outcome.stats,
    })
}
