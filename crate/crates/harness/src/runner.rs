//! Runs (seed, method) pairs and writes their logs.

use std::collections::BTreeMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use aadl_core::accelerator::StopReason;
use aadl_core::data::BatchSampler;
use aadl_core::models::{AffineOperator, GradientModel};
use aadl_core::optimizers::StochasticGradientOperator;
use aadl_core::{AccelerationConfig, DenseVector, FixedPointOperator, StepKind, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_records, median, write_aggregate_csv};
use crate::config::{ExperimentConfig, Method};
use crate::problem::{build, Instance};
use crate::HarnessError;

/// One CSV row per trainer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    /// Completed training epochs after this iteration (0 for problems without data).
    pub epoch: usize,
    /// Batch loss at the iterate the residual was evaluated at.
    pub train_loss: f64,
    /// Validation loss after the step; for affine problems the distance to
    /// the exact fixed point. Empty on iterations that skip validation.
    pub val_loss: Option<f64>,
    pub residual_l2: f64,
    /// Residual norm at the Anderson candidate, when one was evaluated.
    pub candidate_residual_l2: Option<f64>,
    pub step_kind: StepKind,
    pub ma_applied: bool,
    pub ma_active: bool,
    pub wall_ms: f64,
}

pub const CSV_HEADER: [&str; 10] = [
    "iteration",
    "epoch",
    "train_loss",
    "val_loss",
    "residual_l2",
    "candidate_residual_l2",
    "step_kind",
    "ma_applied",
    "ma_active",
    "wall_ms",
];

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub stop: StopReason,
    /// Iterations until the affine iterate came within the target distance.
    pub iterations_to_target: Option<usize>,
}

impl RunResult {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_loss)
    }

    pub fn file_name(&self) -> String {
        run_file_name(self.method, self.seed)
    }
}

pub fn run_file_name(method: Method, seed: u64) -> String {
    format!("{}_seed{}.csv", method.as_str(), seed)
}

/// When and how to validate inside the training loop.
struct Validation<F> {
    every_iteration: bool,
    batches_per_epoch: Option<usize>,
    loss: F,
}

fn drive<O, F>(
    operator: O,
    w0: DenseVector,
    cfg: AccelerationConfig,
    mut validation: Validation<F>,
) -> Result<(Vec<RunRecord>, StopReason), HarnessError>
where
    O: FixedPointOperator,
    F: FnMut(&DenseVector) -> f64,
{
    let max_iterations = cfg.max_iterations;
    let trainer = Trainer::new(operator, w0, cfg)?;
    let mut records = Vec::with_capacity(max_iterations.min(1 << 20));
    let mut last_elapsed = 0.0;
    let out = trainer.run(|rec, w| {
        let k = rec.iteration;
        let epoch = validation.batches_per_epoch.map_or(0, |b| (k + 1) / b);
        let boundary = validation.batches_per_epoch.is_some_and(|b| (k + 1) % b == 0);
        let last = k + 1 == max_iterations;
        let val_loss = (validation.every_iteration || boundary || last).then(|| (validation.loss)(w));
        let elapsed = rec.elapsed.as_secs_f64() * 1e3;
        records.push(RunRecord {
            iteration: k,
            epoch,
            train_loss: rec.loss,
            val_loss,
            residual_l2: rec.outcome.residual_norm_before,
            candidate_residual_l2: rec.outcome.residual_norm_after,
            step_kind: rec.outcome.kind,
            ma_applied: rec.outcome.ma_applied,
            ma_active: rec.ma_active,
            wall_ms: elapsed - last_elapsed,
        });
        last_elapsed = elapsed;
        ControlFlow::Continue(())
    })?;
    Ok((records, out.stop))
}

/// Trains one method on one seed.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, method: Method) -> Result<RunResult, HarnessError> {
    let mut acc = method.acceleration(&cfg.acceleration);
    let instance = build(&cfg.problem, seed)?;
    let (records, stop, iterations_to_target) = match instance {
        Instance::Affine { map, noise, exact, target_error } => {
            let n = map.dim();
            let op = match noise {
                Some(noise) => AffineOperator::with_noise(map, noise, seed),
                None => AffineOperator::new(map),
            };
            let validation = Validation {
                every_iteration: true,
                batches_per_epoch: None,
                loss: |w: &DenseVector| w.sub(&exact).map_or(f64::NAN, |d| d.norm_l2()),
            };
            let (records, stop) = drive(op, DenseVector::zeros(n), acc, validation)?;
            let hit =
                records.iter().position(|r| r.val_loss.is_some_and(|e| e <= target_error)).map(|i| i + 1);
            (records, stop, hit)
        }
        Instance::Network { model, train, validation: held_out } => {
            let sampler = BatchSampler::new(train.rows(), cfg.training.batch_size, cfg.training.sampling)?;
            let per_epoch = sampler.batches_per_epoch();
            if let Some(epochs) = cfg.training.epochs {
                acc.max_iterations = epochs * per_epoch;
            }
            let cost = model.num_params() * held_out.rows();
            let w0 = model.init_params();
            let checker = model.clone();
            let op = StochasticGradientOperator::new(
                model,
                train,
                sampler,
                cfg.optimizer,
                cfg.schedule.clone(),
                seed,
            );
            let validation = Validation {
                every_iteration: cost <= cfg.training.validation_cost_threshold,
                batches_per_epoch: Some(per_epoch),
                loss: |w: &DenseVector| {
                    checker.loss(w, held_out.inputs(), held_out.targets()).unwrap_or(f64::NAN)
                },
            };
            let (records, stop) = drive(op, w0, acc, validation)?;
            (records, stop, None)
        }
    };
    Ok(RunResult { method, seed, records, stop, iterations_to_target })
}

pub fn write_run_csv(path: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if records.is_empty() {
        w.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

pub fn read_run_csv(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let csv_err = |source| HarnessError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<RunRecord>, _>>().map_err(csv_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub iterations: Vec<usize>,
    pub final_train_loss: Vec<f64>,
    pub final_val_loss: Vec<Option<f64>>,
    pub final_val_loss_median: Option<f64>,
    /// Affine problems only: iterations until the target distance was reached.
    pub iterations_to_target: Vec<Option<usize>>,
    pub iterations_to_target_median: Option<f64>,
    pub accelerated_accepted: usize,
    pub accelerated_rejected: usize,
    pub accelerated_unguarded: usize,
    pub moving_average_steps: usize,
    pub wall_ms_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub methods: BTreeMap<String, MethodSummary>,
}

pub fn summarize(cfg: &ExperimentConfig, results: &[RunResult]) -> Summary {
    let mut methods = BTreeMap::new();
    for &method in &cfg.methods {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.method == method).collect();
        if runs.is_empty() {
            continue;
        }
        let count = |kind| runs.iter().flat_map(|r| &r.records).filter(|x| x.step_kind == kind).count();
        let final_val: Vec<Option<f64>> = runs.iter().map(|r| r.final_val_loss()).collect();
        let vals: Vec<f64> = final_val.iter().flatten().copied().collect();
        let hits: Vec<Option<usize>> = runs.iter().map(|r| r.iterations_to_target).collect();
        let hit_values: Vec<f64> = hits.iter().flatten().map(|&h| h as f64).collect();
        let summary = MethodSummary {
            runs: runs.len(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            iterations: runs.iter().map(|r| r.records.len()).collect(),
            final_train_loss: runs
                .iter()
                .map(|r| r.records.last().map_or(f64::NAN, |x| x.train_loss))
                .collect(),
            final_val_loss_median: (vals.len() == runs.len()).then(|| median(&vals)).flatten(),
            final_val_loss: final_val,
            iterations_to_target_median: (hit_values.len() == runs.len())
                .then(|| median(&hit_values))
                .flatten(),
            iterations_to_target: hits,
            accelerated_accepted: count(StepKind::AcceleratedAccepted),
            accelerated_rejected: count(StepKind::AcceleratedRejected),
            accelerated_unguarded: count(StepKind::AcceleratedUnguarded),
            moving_average_steps: runs.iter().flat_map(|r| &r.records).filter(|x| x.ma_applied).count(),
            wall_ms_total: runs.iter().flat_map(|r| &r.records).map(|x| x.wall_ms).sum(),
        };
        methods.insert(method.as_str().to_string(), summary);
    }
    let problem = match &cfg.problem {
        crate::ProblemConfig::Affine(_) => "affine",
        crate::ProblemConfig::MlpCsv(_) => "mlp_csv",
        crate::ProblemConfig::MlpSynthetic(_) => "mlp_synthetic",
        crate::ProblemConfig::Logistic(_) => "logistic",
    };
    Summary { problem: problem.to_string(), methods }
}

/// Runs every (seed, method) pair in parallel, then writes one CSV per run,
/// one aggregate CSV per method and `summary.json` into `output_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    output_dir: &Path,
) -> Result<(Summary, Vec<RunResult>), HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(output_dir)
        .map_err(|source| HarnessError::Io { path: output_dir.to_path_buf(), source })?;
    let jobs: Vec<(u64, Method)> =
        cfg.seeds.iter().flat_map(|&s| cfg.methods.iter().map(move |&m| (s, m))).collect();
    let results = jobs
        .par_iter()
        .map(|&(seed, method)| run_single(cfg, seed, method))
        .collect::<Result<Vec<_>, _>>()?;

    for r in &results {
        write_run_csv(&output_dir.join(r.file_name()), &r.records)?;
    }
    for &method in &cfg.methods {
        let runs: Vec<&[RunRecord]> =
            results.iter().filter(|r| r.method == method).map(|r| r.records.as_slice()).collect();
        let path = output_dir.join(format!("{}_aggregate.csv", method.as_str()));
        write_aggregate_csv(&path, &aggregate_records(&runs))?;
    }
    let summary = summarize(cfg, &results);
    let path: PathBuf = output_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(&path, json).map_err(|source| HarnessError::Io { path, source })?;
    Ok((summary, results))
}
