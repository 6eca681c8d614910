use std::path::{Path, PathBuf};

use brainmt_core::bench::{run_bench, write_bench};
use brainmt_core::checkpoint::Checkpoint;
use brainmt_core::config::{parse_dims, parse_value, KvConfig};
use brainmt_core::cv::{run_cv, write_report};
use brainmt_core::dataset::{fold_assignment, load_dataset, make_splits, write_dataset, LoadedDataset};
use brainmt_core::ig::{attribute_volume, time_average, write_top_k};
use brainmt_core::synthetic::{generate_synthetic_dataset, SyntheticSpec};
use brainmt_core::train::{evaluate, prepare_volume, train as fit, write_history, Evaluation, Metrics};
use brainmt_core::{BrainError, BrainMT, ModelConfig, Result};
use sha2::{Digest, Sha256};

use crate::{Attribute, Bench, Common, Eval, Generate, Train};

const DEFAULT_FOLDS: usize = 3;

fn load_kv(common: &Common) -> Result<KvConfig> {
    match &common.config {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::default()),
    }
}

/// Preset, then config file, then flags.
fn model_config(common: &Common, kv: &KvConfig) -> Result<ModelConfig> {
    let preset = common.preset.as_deref().or(kv.get("preset")).unwrap_or("desk");
    let mut cfg = ModelConfig::preset(preset)?;
    cfg.apply(kv)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = common.scan_order {
        cfg.scan_order = o;
    }
    if let Some(t) = common.frames {
        cfg.frames = t;
    }
    if let Some(f) = common.frame_sampling {
        cfg.frame_sampling = f;
    }
    if let Some(t) = common.task {
        cfg.task = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, kv: &KvConfig) -> Result<PathBuf> {
    let dir = common
        .out_dir
        .clone()
        .or_else(|| kv.get("out_dir").map(PathBuf::from))
        .ok_or_else(|| BrainError::Usage("an output directory is required (--out-dir or out_dir)".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| BrainError::io(&dir, e))?;
    Ok(dir)
}

fn data_path(flag: &Option<PathBuf>, kv: &KvConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| kv.get("data").map(PathBuf::from))
        .ok_or_else(|| BrainError::Usage("a dataset is required (--data or data)".into()))
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| BrainError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn generate(a: Generate) -> Result<()> {
    let kv = load_kv(&a.common)?;
    let n: usize = match a.n_subjects {
        Some(n) => n,
        None => kv.require_parsed("n_subjects")?,
    };
    let dims = match a.dims.as_deref().or(kv.get("dims")) {
        Some(d) => parse_dims(d)?,
        None => return Err(BrainError::Config("missing required key 'dims'".into())),
    };
    let frames = a
        .common
        .frames
        .or(kv.get_parsed("frames")?);
    let frames_total = match a.frames_total.or(kv.get_parsed("frames_total")?).or(frames) {
        Some(t) => t,
        None => return Err(BrainError::Config("missing required key 'frames_total'".into())),
    };
    let seed = match a.common.seed {
        Some(s) => s,
        None => kv.get_parsed("seed")?.unwrap_or(0),
    };
    let folds = a.common.folds.unwrap_or(DEFAULT_FOLDS);
    let dir = out_dir(&a.common, &kv)?;

    let subjects = generate_synthetic_dataset(&SyntheticSpec::new(n, dims, frames_total, seed))?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let split = make_splits(&ids, seed);
    let fold_of = if folds >= 2 && folds <= n {
        fold_assignment(&ids, folds, seed)
    } else {
        vec![0; n]
    };
    let manifest = write_dataset(&dir, &subjects, &split, &fold_of)?;
    let hash = sha256_hex(&manifest)?;
    let hash_path = dir.join("manifest.sha256");
    std::fs::write(&hash_path, format!("{hash}  manifest.csv\n")).map_err(|e| BrainError::io(&hash_path, e))?;
    println!(
        "generated {n} subjects ({}x{}x{}, T={frames_total}) -> {} sha256 {hash}",
        dims[0],
        dims[1],
        dims[2],
        manifest.display()
    );
    Ok(())
}

fn metric_line(cfg: &ModelConfig, ev: &Evaluation) -> String {
    let names = Metrics::names(cfg.task);
    let parts: Vec<String> = names
        .iter()
        .zip(ev.metrics.0)
        .map(|(n, v)| format!("{n}={v:.4}"))
        .collect();
    format!("loss={:.4} {}", ev.loss, parts.join(" "))
}

fn write_predictions(path: &Path, ev: &Evaluation) -> Result<()> {
    let err = |e: csv::Error| BrainError::parse(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["id", "target", "prediction"]).map_err(err)?;
    for ((id, t), p) in ev.ids.iter().zip(&ev.targets).zip(&ev.preds) {
        w.write_record([id.clone(), t.to_string(), p.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| BrainError::io(path, e))
}

pub fn train(a: Train) -> Result<()> {
    let kv = load_kv(&a.common)?;
    let mut cfg = model_config(&a.common, &kv)?;
    if a.shuffle_frames {
        cfg.train.shuffle_frames = true;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e);
    }
    cfg.validate()?;
    let data = load_dataset(&data_path(&a.data, &kv)?)?;
    let dir = out_dir(&a.common, &kv)?;

    if a.common.folds.is_some() || a.common.repeats.is_some() {
        let folds = a.common.folds.unwrap_or(DEFAULT_FOLDS);
        let repeats = a.common.repeats.unwrap_or(1);
        let report = run_cv(&cfg, &data.subjects, folds, repeats, |r| {
            println!("repeat {} fold {}: loss={:.4} {:?}", r.repeat, r.fold, r.loss, r.metrics.0);
        })?;
        write_report(&dir, cfg.task, &report)?;
        for s in &report.summary {
            println!("{}: mean {:.4} std(folds) {:.4} std(repeats) {:.4}", s.name, s.mean, s.std_across_folds, s.std_across_repeats);
        }
        return Ok(());
    }

    let (model, params) = BrainMT::new(&cfg)?;
    let state = fit(&model, params, &data.subjects, &data.split, |row| {
        println!("epoch {} {} loss={:.4} {:?}", row.epoch, row.split, row.loss, row.metrics.0);
    })?;
    write_history(&dir.join("metrics.csv"), cfg.task, &state.history)?;
    if !data.split.test.is_empty() {
        let ev = evaluate(&model, &state.best_params, &data.subjects, &data.split.test)?;
        write_predictions(&dir.join("test_predictions.csv"), &ev)?;
        println!("test {}", metric_line(&cfg, &ev));
    }
    let ck = Checkpoint { config: cfg, state };
    ck.save(&dir.join("model.ckpt"))?;
    Ok(())
}

fn split_ids(data: &LoadedDataset, which: &str) -> Result<Vec<String>> {
    let s = &data.split;
    let ids = match which {
        "train" => s.train.clone(),
        "val" => s.val.clone(),
        "test" => s.test.clone(),
        "all" => data.subjects.iter().map(|x| x.id.clone()).collect(),
        other => return Err(BrainError::Usage(format!("unknown split '{other}' (expected train, val, test or all)"))),
    };
    if ids.is_empty() {
        return Err(BrainError::Data(format!("split '{which}' is empty")));
    }
    Ok(ids)
}

pub fn eval(a: Eval) -> Result<()> {
    let kv = load_kv(&a.common)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (model, _) = BrainMT::new(&ck.config)?;
    let data = load_dataset(&data_path(&a.data, &kv)?)?;
    let ids = split_ids(&data, &a.split)?;
    let ev = evaluate(&model, &ck.state.best_params, &data.subjects, &ids)?;
    let dir = out_dir(&a.common, &kv)?;
    write_predictions(&dir.join(format!("{}_predictions.csv", a.split)), &ev)?;
    println!("{} {}", a.split, metric_line(&ck.config, &ev));
    Ok(())
}

pub fn attribute(a: Attribute) -> Result<()> {
    let kv = load_kv(&a.common)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (model, _) = BrainMT::new(&ck.config)?;
    let data = load_dataset(&data_path(&a.data, &kv)?)?;
    let id = match &a.subject {
        Some(id) => id.clone(),
        None => data
            .split
            .test
            .first()
            .or_else(|| data.subjects.first().map(|s| &s.id))
            .cloned()
            .ok_or_else(|| BrainError::Data("dataset has no subjects".into()))?,
    };
    let index = data
        .subjects
        .iter()
        .position(|s| s.id == id)
        .ok_or_else(|| BrainError::Data(format!("unknown subject '{id}'")))?;
    let volume = prepare_volume(&ck.config, &data.subjects[index], index, None)?;
    let (attr, map) = attribute_volume(&model, &ck.state.best_params, &volume, a.steps)?;
    let dir = out_dir(&a.common, &kv)?;
    map.save(&dir.join(format!("{id}_ig.bvol")))?;
    write_top_k(&dir.join(format!("{id}_ig_top{}.csv", a.top_k)), &map, a.top_k)?;
    let mean = time_average(&map);
    let mean_vol = brainmt_core::volume::Volume4D::new(1, map.dims(), mean, map.mask().to_vec())?;
    mean_vol.save(&dir.join(format!("{id}_ig_mean.bvol")))?;
    println!(
        "{id}: F(x)={:.6} F(baseline)={:.6} sum={:.6} residual={:.3e} steps={}",
        attr.output,
        attr.baseline_output,
        attr.values.data().iter().sum::<f64>(),
        attr.residual,
        attr.steps
    );
    Ok(())
}

pub fn bench(a: Bench) -> Result<()> {
    let kv = load_kv(&a.common)?;
    let cfg = model_config(&a.common, &kv)?;
    let ts: Vec<usize> = a
        .t_list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value("t-list", s))
        .collect::<Result<_>>()
        .map_err(|e| BrainError::Usage(e.to_string()))?;
    let rows = run_bench(&cfg, &ts)?;
    let dir = out_dir(&a.common, &kv)?;
    write_bench(&dir.join("bench.csv"), &rows)?;
    for r in &rows {
        println!(
            "T={} L={} activations={} params={} (excl. P_t {}) forward={:.1} ms",
            r.t, r.tokens, r.activation_elements, r.parameters, r.parameters_excl_pt, r.forward_ms
        );
    }
    Ok(())
}
