//! End-to-end run: data, split, inputs, training, evaluation report.

use serde::{Deserialize, Serialize};

use crate::backbone::{prepare_inputs, train, Model, ModelInputs, TrainOutcome};
use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, load_dataset_dir, split_leave_one_out, Dataset, SplitSet};
use crate::error::Result;
use crate::metrics::{evaluate, MetricReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub config_hash: String,
    pub best_epoch: usize,
    pub validation: MetricReport,
    pub test: MetricReport,
    /// Present when the dataset ships unbiased held-out pairs.
    pub deconfounded_test: Option<MetricReport>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.dir {
        Some(dir) => load_dataset_dir(dir),
        None => generate_synthetic(&cfg.data.synthetic),
    }
}

/// Split plus model inputs built on the training graph.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitSet,
    pub inputs: ModelInputs,
}

pub fn prepare(cfg: &RunConfig, dataset: Dataset) -> Result<Prepared> {
    let split = split_leave_one_out(&dataset.graph, cfg.seed);
    let train_graph = split.train_graph(&dataset.graph)?;
    let inputs = prepare_inputs(&dataset, train_graph, cfg)?;
    Ok(Prepared {
        dataset,
        split,
        inputs,
    })
}

/// Evaluates a frozen model on the validation, test and (if present)
/// deconfounded pairs at the configured cutoffs.
pub fn report(model: &Model, prep: &Prepared, best_epoch: usize) -> Result<RunReport> {
    report_at(model, prep, best_epoch, &model.config.train.eval_ks)
}

pub fn report_at(model: &Model, prep: &Prepared, best_epoch: usize, ks: &[usize]) -> Result<RunReport> {
    let scores = model.infer(&prep.inputs)?.scores;
    let train_items = prep.inputs.train_graph.user_items();
    let deconfounded_test = match &prep.dataset.deconfounded_test {
        Some(pairs) if !pairs.is_empty() => Some(evaluate(&scores, pairs, &train_items, ks)?),
        _ => None,
    };
    Ok(RunReport {
        dataset: prep.dataset.name.clone(),
        config_hash: model.config.hash(),
        best_epoch,
        validation: evaluate(&scores, &prep.split.validation_pairs, &train_items, ks)?,
        test: evaluate(&scores, &prep.split.test_pairs, &train_items, ks)?,
        deconfounded_test,
    })
}

pub struct RunResult {
    pub prepared: Prepared,
    pub outcome: TrainOutcome,
    pub report: RunReport,
}

pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    let prepared = prepare(cfg, load_data(cfg)?)?;
    let outcome = train(cfg, &prepared.inputs, &prepared.split.validation_pairs)?;
    let report = report(&outcome.model, &prepared, outcome.best_epoch)?;
    Ok(RunResult {
        prepared,
        outcome,
        report,
    })
}
