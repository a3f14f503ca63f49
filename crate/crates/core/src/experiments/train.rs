use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::init::{derive_stream, Purpose};
use crate::nn::loss::count_correct;
use crate::nn::{Mode, Model, ParamNode};
use crate::optim::OptimizerState;
use crate::randomout::{all_cgn, scan_and_reset, ResetEvent, ScanPoint};

use super::config::TrainConfig;
use super::metrics::{self, MetricsRecord};

/// Accuracy margin above chance below which a finished run counts as failed.
pub const FAILURE_MARGIN: f64 = 0.05;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub config: TrainConfig,
    pub final_test_acc: f64,
    pub diverged: bool,
    /// Diverged, or finished within [`FAILURE_MARGIN`] of chance accuracy.
    pub failed: bool,
    pub chance: f64,
    pub total_resets: usize,
    pub resets: Vec<ResetEvent>,
}

#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
    pub final_params: Vec<ParamNode>,
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y) = data.gather(chunk);
        correct += count_correct(&model.predict(&x)?, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Loads the configured dataset and trains on it.
pub fn run_training(cfg: &TrainConfig) -> Result<RunArtifact> {
    let (train, test) = cfg.dataset.load()?;
    train_on(cfg, &train, &test)
}

/// The training loop. Per batch: forward, backward, CGN telemetry, optional
/// RandomOut scan, optimizer step. Per epoch: test-set accuracy. A non-finite
/// loss or gradient marks the run divergent and stops it.
pub fn train_on(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<RunArtifact> {
    cfg.validate()?;
    if train.sample_dims() != cfg.model.input_shape.as_slice() {
        return Err(Error::Config(format!(
            "dataset samples are {:?} but the model expects {:?}",
            train.sample_dims(),
            cfg.model.input_shape
        )));
    }
    if train.num_classes > cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model has {}",
            train.num_classes, cfg.model.num_classes
        )));
    }

    let mut init_rng = derive_stream(cfg.seed, Purpose::Init, 0);
    let mut reset_rng = derive_stream(cfg.seed, Purpose::RandomOut, 0);
    let mut model = cfg.model.build(&mut init_rng)?;
    let mut optimizer = OptimizerState::new(cfg.optimizer, model.params());
    let plan = BatchPlan {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size.max(1),
        samples: train.len(),
        seed: cfg.seed,
    };
    let total = plan.total_batches();

    let mut records = Vec::with_capacity(total);
    let mut resets = Vec::new();
    let mut done = 0usize;
    let mut diverged = false;
    let mut last_test_acc = None;

    'epochs: for epoch in 0..cfg.epochs {
        for (batch, idx) in plan.batches(epoch).iter().enumerate() {
            let (x, y) = train.gather(idx);
            model.zero_grads();
            let cache = model.forward(&x, Mode::Train)?;
            let loss = model.backward(&cache, &y)?;
            let train_acc = count_correct(cache.logits(), &y) as f64 / y.len() as f64;

            let scores = all_cgn(&model);
            let mean_cgn = if scores.is_empty() {
                0.0
            } else {
                scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64
            };
            let below_thresh = scores.iter().filter(|(_, s)| *s < cfg.telemetry_tau).count();

            let finite = loss.is_finite() && model.params().iter().all(|p| p.grad.all_finite());
            let mut record = MetricsRecord {
                epoch,
                batch,
                train_loss: loss,
                train_acc,
                test_acc: None,
                mean_cgn,
                below_thresh,
                resets: 0,
                diverged: !finite,
            };
            if !finite {
                diverged = true;
                records.push(record);
                break 'epochs;
            }

            if let Some(ro) = &cfg.randomout {
                if done % ro.check_every == 0 {
                    let at = ScanPoint {
                        epoch,
                        batch,
                        progress: done as f64 / total as f64,
                    };
                    let events = scan_and_reset(&mut model, &mut optimizer, ro, at, &mut reset_rng);
                    record.resets = events.len();
                    resets.extend(events);
                }
            }
            optimizer.step(model.params_mut());
            records.push(record);
            done += 1;
        }
        let acc = evaluate(&model, test)?;
        if let Some(last) = records.last_mut() {
            last.test_acc = Some(acc);
        }
        last_test_acc = Some(acc);
    }

    let final_test_acc = match last_test_acc {
        Some(acc) if !diverged => acc,
        _ => evaluate(&model, test)?,
    };
    let chance = 1.0 / cfg.model.num_classes as f64;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        final_test_acc,
        diverged,
        failed: diverged || final_test_acc < chance + FAILURE_MARGIN,
        chance,
        total_resets: resets.len(),
        resets,
    };
    Ok(RunArtifact {
        summary,
        records,
        final_params: model.params().to_vec(),
    })
}

/// Directory of a run under `out`, named by its config hash.
pub fn run_dir(out: &Path, cfg: &TrainConfig) -> PathBuf {
    out.join(cfg.hash())
}

/// Writes `metrics.csv`, `run.json` and `params.json` into `dir`.
pub fn save_run(artifact: &RunArtifact, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    metrics::write_metrics(&artifact.records, dir.join("metrics.csv"))?;
    write_json(&dir.join("params.json"), &artifact.final_params)?;
    // run.json last: its presence marks the run complete.
    write_json(&dir.join("run.json"), &artifact.summary)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a completed run written by [`save_run`]; `None` if it is absent or incomplete.
pub fn load_run(dir: &Path) -> Result<Option<RunArtifact>> {
    let summary_path = dir.join("run.json");
    if !summary_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: summary_path.clone(),
        line: e.line() as u64,
        reason: e.to_string(),
    })?;
    let records = metrics::read_metrics(dir.join("metrics.csv"))?;
    let params_path = dir.join("params.json");
    let text = std::fs::read_to_string(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let final_params = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: params_path.clone(),
        line: e.line() as u64,
        reason: e.to_string(),
    })?;
    Ok(Some(RunArtifact {
        summary,
        records,
        final_params,
    }))
}
