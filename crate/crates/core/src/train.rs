//! Training loop with validation-based early stopping, and evaluation.

use std::collections::HashMap;
use std::path::Path;

use brainmt_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Task};
use crate::dataset::DatasetSplit;
use crate::error::{BrainError, Result};
use crate::metrics::{evaluate_classification, evaluate_regression};
use crate::model::{volume_tensor, BrainMT};
use crate::optim::{lr_schedule, AdamW};
use crate::params::ParamStore;
use crate::synthetic::Subject;
use crate::volume::Volume4D;

/// Mixes several integers into one seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Regression target or class label (as 0/1) of a subject.
pub fn target_of(subject: &Subject, task: Task) -> f64 {
    match task {
        Task::Regression => subject.cognition,
        Task::Classification => f64::from(subject.sex),
    }
}

/// Task metrics, three per task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics(pub [f64; 3]);

impl Metrics {
    pub fn names(task: Task) -> [&'static str; 3] {
        match task {
            Task::Regression => ["mse", "mae", "r"],
            Task::Classification => ["acc", "bacc", "auroc"],
        }
    }

    pub fn compute(task: Task, preds: &[f64], targets: &[f64]) -> Result<Metrics> {
        Ok(match task {
            Task::Regression => {
                let m = evaluate_regression(preds, targets)?;
                Metrics([m.mse, m.mae, m.r])
            }
            Task::Classification => {
                let labels: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
                let m = evaluate_classification(preds, &labels)?;
                Metrics([m.acc, m.bacc, m.auroc])
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metrics: Metrics,
}

/// Parameters, optimizer state, counters and history of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_params: ParamStore,
    pub history: Vec<HistoryRow>,
}

/// Outputs of [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub preds: Vec<f64>,
    pub targets: Vec<f64>,
    pub loss: f64,
    pub metrics: Metrics,
}

/// Fixed random frame order used by the shuffled-frames control.
pub fn frame_permutation(frames: usize, seed: u64, subject: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..frames).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5348_5546, subject as u64])));
    perm
}

/// Prepares the model input for one subject. Training draws a fresh frame
/// sample per epoch; evaluation (`epoch = None`) uses a fixed sample.
pub fn prepare_volume(cfg: &ModelConfig, subject: &Subject, index: usize, epoch: Option<usize>) -> Result<Volume4D> {
    let mut v = subject.volume.clone();
    if cfg.train.shuffle_frames {
        v = v.select_frames(&frame_permutation(v.frames(), cfg.seed, index))?;
    }
    let seed = match epoch {
        Some(e) => derive_seed(&[cfg.seed, 1, e as u64, index as u64]),
        None => derive_seed(&[cfg.seed, 2, index as u64]),
    };
    v.sample_frames(cfg.frames, cfg.frame_sampling, seed)
}

fn task_loss(task: Task, pred: f64, target: f64) -> f64 {
    match task {
        Task::Regression => (pred - target).powi(2),
        Task::Classification => brainmt_tensor::bce_with_logits_value(pred, target),
    }
}

fn index_of(subjects: &[Subject]) -> HashMap<&str, usize> {
    subjects.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
}

fn resolve(ids: &[String], index: &HashMap<&str, usize>) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| BrainError::Data(format!("split refers to unknown subject '{id}'")))
        })
        .collect()
}

/// Predicts a list of subjects (by position in `subjects`) with the fixed evaluation frames.
pub fn evaluate_indices(model: &BrainMT, params: &ParamStore, subjects: &[Subject], which: &[usize]) -> Result<Evaluation> {
    let cfg = &model.config;
    let preds = which
        .par_iter()
        .map(|&i| {
            let v = prepare_volume(cfg, &subjects[i], i, None)?;
            model.predict(params, &v)
        })
        .collect::<Result<Vec<f64>>>()?;
    let targets: Vec<f64> = which.iter().map(|&i| target_of(&subjects[i], cfg.task)).collect();
    let loss = preds.iter().zip(&targets).map(|(&p, &t)| task_loss(cfg.task, p, t)).sum::<f64>() / preds.len().max(1) as f64;
    Ok(Evaluation {
        ids: which.iter().map(|&i| subjects[i].id.clone()).collect(),
        metrics: Metrics::compute(cfg.task, &preds, &targets)?,
        preds,
        targets,
        loss,
    })
}

/// Evaluates the subjects named in `ids`.
pub fn evaluate(model: &BrainMT, params: &ParamStore, subjects: &[Subject], ids: &[String]) -> Result<Evaluation> {
    let which = resolve(ids, &index_of(subjects))?;
    evaluate_indices(model, params, subjects, &which)
}

/// Loss, prediction and gradients for one subject.
pub fn sample_gradients(model: &BrainMT, params: &ParamStore, volume: &Volume4D, target: f64) -> Result<(f64, f64, Vec<Tensor>)> {
    let g = Graph::new();
    let p = params.bind(&g);
    let x = g.constant(volume_tensor(volume)?);
    let out = model.forward(&g, &p, &x)?;
    let loss = model.loss(&g, &out, target)?;
    g.backward(&loss)?;
    Ok((loss.value().data()[0], out.value().data()[0], p.grads(&g)))
}

/// Runs the epoch loop. `on_epoch` sees every history row as it is produced.
pub fn train(
    model: &BrainMT,
    params: ParamStore,
    subjects: &[Subject],
    split: &DatasetSplit,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainState> {
    let cfg = &model.config;
    let tc = &cfg.train;
    let index = index_of(subjects);
    let train_idx = resolve(&split.train, &index)?;
    let val_idx = resolve(&split.val, &index)?;
    if train_idx.is_empty() {
        return Err(BrainError::Data("training split is empty".into()));
    }
    let steps_per_epoch = train_idx.len().div_ceil(tc.batch_size);
    let total = tc.epochs * steps_per_epoch;
    let warmup = tc.warmup_epochs * steps_per_epoch;
    let mut state = TrainState {
        optimizer: AdamW::new(&params, tc.weight_decay),
        best_params: params.clone(),
        params,
        epoch: 0,
        best_val: f64::INFINITY,
        best_epoch: 0,
        history: Vec::new(),
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 3]));
    let mut stale = 0;
    let mut done = false;

    for epoch in 0..tc.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let (mut preds, mut targets, mut loss_sum) = (Vec::new(), Vec::new(), 0.0);
        for batch in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| state.optimizer.step >= m) {
                done = true;
                break;
            }
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let subject = &subjects[i];
                let v = prepare_volume(cfg, subject, i, Some(epoch))?;
                let target = target_of(subject, cfg.task);
                let (loss, pred, grads) = sample_gradients(model, &state.params, &v, target)?;
                if !loss.is_finite() {
                    return Err(BrainError::Numeric(format!(
                        "non-finite loss {loss} at epoch {epoch}, step {}, subject {}",
                        state.optimizer.step, subject.id
                    )));
                }
                loss_sum += loss;
                preds.push(pred);
                targets.push(target);
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.add_assign(y)?;
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            let lr = lr_schedule(state.optimizer.step, tc.lr, warmup, total);
            state.optimizer.update(&mut state.params, &grads, lr)?;
        }
        if preds.is_empty() {
            break;
        }
        state.epoch = epoch + 1;
        let row = HistoryRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / preds.len() as f64,
            metrics: Metrics::compute(cfg.task, &preds, &targets)?,
        };
        on_epoch(&row);
        state.history.push(row);

        if val_idx.is_empty() {
            state.best_params = state.params.clone();
            state.best_epoch = epoch;
        } else {
            let ev = evaluate_indices(model, &state.params, subjects, &val_idx)?;
            let row = HistoryRow {
                epoch,
                split: "val".into(),
                loss: ev.loss,
                metrics: ev.metrics,
            };
            on_epoch(&row);
            state.history.push(row);
            if ev.loss < state.best_val {
                state.best_val = ev.loss;
                state.best_epoch = epoch;
                state.best_params = state.params.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= tc.patience {
                    break;
                }
            }
        }
        if done {
            break;
        }
    }
    Ok(state)
}

pub const METRICS_HEADER: [&str; 3] = ["epoch", "split", "loss"];

/// Writes history rows as `epoch,split,loss,<three metric columns>`.
pub fn write_history(path: &Path, task: Task, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BrainError::parse(path, e.to_string()))?;
    let names = Metrics::names(task);
    let header: Vec<&str> = METRICS_HEADER.iter().chain(names.iter()).copied().collect();
    let io = |e: csv::Error| BrainError::parse(path, e.to_string());
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.split.clone(), r.loss.to_string()];
        rec.extend(r.metrics.0.iter().map(f64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| BrainError::io(path, e))
}
