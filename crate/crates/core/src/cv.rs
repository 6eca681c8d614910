//! Repeated k-fold cross-validation with fold- and repeat-level spreads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Task};
use crate::dataset::cv_splits;
use crate::error::{BrainError, Result};
use crate::metrics::mean_std;
use crate::model::BrainMT;
use crate::synthetic::Subject;
use crate::train::{evaluate, train, Metrics};

/// Test-set result of one (repeat, fold) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub loss: f64,
    pub metrics: Metrics,
}

/// Aggregate of one metric over all runs. Standard deviations are population
/// standard deviations: over every run, within each repeat across folds
/// (averaged over repeats), and across the per-repeat means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std_all: f64,
    pub std_across_folds: f64,
    pub std_across_repeats: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<MetricSummary>,
}

/// Summarizes `values[repeat][fold]`.
pub fn summarize(name: &str, values: &[Vec<f64>]) -> MetricSummary {
    let all: Vec<f64> = values.iter().flatten().copied().collect();
    let (mean, std_all) = mean_std(&all);
    let within: Vec<f64> = values.iter().map(|r| mean_std(r).1).collect();
    let repeat_means: Vec<f64> = values.iter().map(|r| mean_std(r).0).collect();
    MetricSummary {
        name: name.to_string(),
        mean,
        std_all,
        std_across_folds: mean_std(&within).0,
        std_across_repeats: mean_std(&repeat_means).1,
    }
}

/// Aggregates fold results into per-metric summaries (loss first).
pub fn aggregate(task: Task, results: &[FoldResult]) -> Vec<MetricSummary> {
    let repeats = results.iter().map(|r| r.repeat + 1).max().unwrap_or(0);
    let pick = |f: &dyn Fn(&FoldResult) -> f64| -> Vec<Vec<f64>> {
        (0..repeats)
            .map(|rep| results.iter().filter(|r| r.repeat == rep).map(f).collect())
            .collect()
    };
    let mut out = vec![summarize("loss", &pick(&|r| r.loss))];
    for (k, name) in Metrics::names(task).iter().enumerate() {
        out.push(summarize(name, &pick(&|r| r.metrics.0[k])));
    }
    out
}

/// Trains and tests one model per (repeat, fold); `progress` sees each result.
pub fn run_cv(
    cfg: &ModelConfig,
    subjects: &[Subject],
    folds: usize,
    repeats: usize,
    mut progress: impl FnMut(&FoldResult),
) -> Result<CvReport> {
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let mut results = Vec::new();
    for split in cv_splits(&ids, folds, repeats, cfg.seed)? {
        let (model, params) = BrainMT::new(cfg)?;
        let state = train(&model, params, subjects, &split, |_| {})?;
        let ev = evaluate(&model, &state.best_params, subjects, &split.test)?;
        let r = FoldResult {
            repeat: split.repeat,
            fold: split.fold_index,
            loss: ev.loss,
            metrics: ev.metrics,
        };
        progress(&r);
        results.push(r);
    }
    Ok(CvReport {
        summary: aggregate(cfg.task, &results),
        folds: results,
    })
}

fn csv_err(p: &Path) -> impl Fn(csv::Error) -> BrainError + '_ {
    move |e| BrainError::parse(p, e.to_string())
}

/// Writes `cv_folds.csv` and `cv_summary.csv` into `dir`.
pub fn write_report(dir: &Path, task: Task, report: &CvReport) -> Result<()> {
    let names = Metrics::names(task);
    let fold_path = dir.join("cv_folds.csv");
    let mut w = csv::Writer::from_path(&fold_path).map_err(csv_err(&fold_path))?;
    let mut header = vec!["repeat", "fold", "loss"];
    header.extend(names);
    w.write_record(&header).map_err(csv_err(&fold_path))?;
    for r in &report.folds {
        let mut rec = vec![r.repeat.to_string(), r.fold.to_string(), r.loss.to_string()];
        rec.extend(r.metrics.0.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(&fold_path))?;
    }
    w.flush().map_err(|e| BrainError::io(&fold_path, e))?;

    let sum_path = dir.join("cv_summary.csv");
    let mut w = csv::Writer::from_path(&sum_path).map_err(csv_err(&sum_path))?;
    w.write_record(["metric", "mean", "std_all", "std_across_folds", "std_across_repeats"])
        .map_err(csv_err(&sum_path))?;
    for s in &report.summary {
        w.write_record([
            s.name.clone(),
            s.mean.to_string(),
            s.std_all.to_string(),
            s.std_across_folds.to_string(),
            s.std_across_repeats.to_string(),
        ])
        .map_err(csv_err(&sum_path))?;
    }
    w.flush().map_err(|e| BrainError::io(&sum_path, e))
}
