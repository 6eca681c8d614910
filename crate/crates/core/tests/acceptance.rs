//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! `BRAINMT_ACCEPT=1,2,10` restricts the run to the listed criteria.
//! Failures are reported but only change the exit status when
//! `BRAINMT_ACCEPT_STRICT` is set, so the rest of the workspace tests still run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use brainmt_core::attention::{attention_probabilities, multi_head_attention, TransformerBlock};
use brainmt_core::bench::run_bench;
use brainmt_core::config::{ModelConfig, ScanOrder};
use brainmt_core::dataset::{make_splits, DatasetSplit};
use brainmt_core::encoder::ConvStage;
use brainmt_core::ig::{attribute_volume, integrated_gradients, LinearModel, ModelOutput};
use brainmt_core::mamba::{sequence_index, MambaBlock, MambaDims};
use brainmt_core::metrics::{evaluate_classification, evaluate_regression};
use brainmt_core::model::{volume_tensor, BrainMT};
use brainmt_core::params::ParamStore;
use brainmt_core::ssm::{reorder, selective_scan, selective_scan_values, zoh_discretize};
use brainmt_core::synthetic::{generate_synthetic_dataset, Subject, SyntheticSpec};
use brainmt_core::train::{evaluate, evaluate_indices, prepare_volume, train};
use brainmt_tensor::gradcheck::{project, GradCheck};
use brainmt_tensor::{Activation, Conv3dSpec, Graph, Result as TResult, Tensor, TensorError, Var};
use common::{gradient_failures, max_abs_diff, random};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    num / den
}

// ---------------------------------------------------------------- 1

fn c1_scan_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut seed = 100;
    for l in [1, 2, 7, 64, 257] {
        for d in [2, 8] {
            for _ in 0..2 {
                seed += 1;
                let mut r = rng(seed);
                let n = 16;
                let u = Tensor::from_fn(&[l, d], |_| r.gen_range(-1.0..1.0));
                let delta = Tensor::from_fn(&[l, d], |_| r.gen_range(0.001..0.5));
                let a = Tensor::from_fn(&[d, n], |_| -r.gen_range(0.1..4.0));
                let b = Tensor::from_fn(&[l, n], |_| r.gen_range(-1.0..1.0));
                let c = Tensor::from_fn(&[l, n], |_| r.gen_range(-1.0..1.0));
                // per-step recurrence with its own discretization
                let mut want = vec![0.0; l * d];
                for ch in 0..d {
                    let mut h = vec![0.0; n];
                    for t in 0..l {
                        let dt = delta.data()[t * d + ch];
                        for s in 0..n {
                            let av = a.data()[ch * n + s];
                            let abar = (dt * av).exp();
                            h[s] = abar * h[s] + (abar - 1.0) / av * b.data()[t * n + s] * u.data()[t * d + ch];
                            want[t * d + ch] += c.data()[t * n + s] * h[s];
                        }
                    }
                }
                let got = selective_scan_values(&u, &delta, &a, &b, &c).unwrap();
                worst = worst.max(rel_err(got.data(), &want));
                count += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-10 && count == 20 && secs < 10.0, format!("{count} instances, max rel err {worst:.2e}, {secs:.2} s"))
}

// ---------------------------------------------------------------- 2

fn c2_zoh() -> Outcome {
    let mut worst: f64 = 0.0;
    let (abar, bbar) = zoh_discretize(1.0, 1.0, 2f64.ln());
    worst = worst.max((abar - 2.0).abs()).max((bbar - 1.0).abs());
    let (abar, bbar) = zoh_discretize(-1.0, 1.0, 1.0);
    let e = (-1f64).exp();
    worst = worst.max((abar - e).abs()).max((bbar - (1.0 - e)).abs());
    let (abar, bbar) = zoh_discretize(0.0, 2.0, 0.3);
    worst = worst.max((abar - 1.0).abs()).max((bbar - 0.6).abs());

    let mut small: f64 = 0.0;
    for a in [-1.0, 1.0, -2.5] {
        let delta = 1e-7 / f64::abs(a);
        let exact = (a * delta).exp_m1() / a * 0.8;
        let (_, bbar) = zoh_discretize(a, 0.8, delta);
        small = small.max(((bbar - exact) / exact).abs());
    }
    outcome(worst < 1e-12 && small < 1e-6, format!("closed forms max err {worst:.1e}, |delta a| = 1e-7 rel err {small:.1e}"))
}

// ---------------------------------------------------------------- 3

const GRAD_TOL: f64 = 1e-4;

fn op_error<F>(inputs: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&Graph, &[Var]) -> TResult<Var>,
{
    GradCheck::default().max_error(&inputs, f).unwrap()
}

fn lift(e: brainmt_core::BrainError) -> TensorError {
    TensorError::Backward(e.to_string())
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng(300);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0));
    let mut ops: Vec<(&str, f64)> = Vec::new();

    let (a, b) = (rand(&[2, 3, 4]), rand(&[3, 1]));
    ops.push(("add", op_error(vec![a.clone(), b.clone()], |g, v| project(g, &g.add(&v[0], &v[1])?, 1))));
    ops.push(("sub", op_error(vec![a.clone(), b.clone()], |g, v| project(g, &g.sub(&v[0], &v[1])?, 2))));
    ops.push(("mul", op_error(vec![a.clone(), b], |g, v| project(g, &g.mul(&v[0], &v[1])?, 3))));
    ops.push(("scale+mean", op_error(vec![a.clone()], |g, v| {
        let s = g.scale(&v[0], -1.3)?;
        g.mean(&g.mul(&s, &v[0])?)
    })));
    for (name, kind) in [
        ("gelu", Activation::Gelu),
        ("silu", Activation::Silu),
        ("softplus", Activation::Softplus),
        ("exp", Activation::Exp),
        ("sigmoid", Activation::Sigmoid),
    ] {
        ops.push((name, op_error(vec![rand(&[3, 5])], move |g, v| project(g, &g.activation(&v[0], kind)?, 4))));
    }
    ops.push(("matmul", op_error(vec![rand(&[3, 4]), rand(&[4, 2])], |g, v| project(g, &g.matmul(&v[0], &v[1])?, 5))));
    ops.push(("linear", op_error(vec![rand(&[3, 4]), rand(&[4, 2]), rand(&[2])], |g, v| {
        project(g, &g.linear(&v[0], &v[1], Some(&v[2]))?, 6)
    })));
    ops.push(("permute/reshape", op_error(vec![rand(&[2, 3, 4])], |g, v| {
        let p = g.permute(&v[0], &[2, 0, 1])?;
        project(g, &g.reshape(&p, &[4, 6])?, 7)
    })));
    ops.push(("slice/concat/gather", op_error(vec![rand(&[5, 3]), rand(&[2, 3])], |g, v| {
        let s = g.slice(&v[0], 0, 1, 4)?;
        let c = g.concat(&[&s, &v[1]], 0)?;
        project(g, &g.gather(&c, 0, &[4, 0, 0, 2])?, 8)
    })));
    ops.push(("softmax", op_error(vec![rand(&[3, 5])], |g, v| project(g, &g.softmax(&v[0], -1)?, 9))));
    ops.push(("layer_norm", op_error(vec![rand(&[3, 6]), rand(&[6]), rand(&[6])], |g, v| {
        project(g, &g.layer_norm(&v[0], &v[1], &v[2], -1)?, 10)
    })));
    ops.push(("conv3d", op_error(vec![rand(&[2, 2, 4, 4, 4]), rand(&[3, 2, 2, 2, 2]), rand(&[3])], |g, v| {
        project(g, &g.conv3d(&v[0], &v[1], &v[2], Conv3dSpec::new(2, 2, 0))?, 11)
    })));
    ops.push(("conv3d pad", op_error(vec![rand(&[1, 2, 3, 4, 3]), rand(&[2, 2, 3, 3, 3]), rand(&[2])], |g, v| {
        project(g, &g.conv3d(&v[0], &v[1], &v[2], Conv3dSpec::new(3, 1, 1))?, 12)
    })));
    ops.push(("conv1d_causal", op_error(vec![rand(&[6, 3]), rand(&[3, 4]), rand(&[3])], |g, v| {
        project(g, &g.conv1d_causal(&v[0], &v[1], &v[2])?, 13)
    })));
    let target = rand(&[4]);
    ops.push(("mse", op_error(vec![rand(&[4])], |g, v| g.mse(&v[0], &g.constant(target.clone())))));
    let labels = Tensor::from_fn(&[4], |i| (i % 2) as f64);
    ops.push(("bce", op_error(vec![rand(&[4])], |g, v| g.bce_with_logits(&v[0], &g.constant(labels.clone())))));

    let (l, d, n) = (9, 3, 4);
    let scan_in = vec![
        rand(&[l, d]),
        Tensor::from_fn(&[l, d], |i| 0.05 + 0.03 * (i % 7) as f64),
        Tensor::from_fn(&[d, n], |i| -0.3 - 0.4 * (i % 5) as f64),
        rand(&[l, n]),
        rand(&[l, n]),
    ];
    ops.push(("selective_scan", op_error(scan_in, |g, v| {
        project(g, &selective_scan(g, &v[0], &v[1], &v[2], &v[3], &v[4]).map_err(lift)?, 14)
    })));
    ops.push(("attention", op_error(vec![rand(&[5, 6]), rand(&[5, 6]), rand(&[5, 6])], |g, v| {
        project(g, &multi_head_attention(g, &v[0], &v[1], &v[2], 2).map_err(lift)?, 15)
    })));

    let mut bad: Vec<String> = ops
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect();
    let worst_op = ops.iter().map(|(_, e)| *e).fold(0.0, f64::max);

    // blocks and the micro model, judged per parameter
    let mut store = ParamStore::new();
    let stage = ConvStage::new(&mut store, "stage", 2, &mut rng(301));
    for (name, e) in gradient_failures(&store, vec![random(&[1, 2, 4, 4, 4], 302)], 12, GRAD_TOL, |g, p, v| stage.forward(g, p, &v[0])) {
        bad.push(format!("conv stage {name} {e:.1e}"));
    }
    let mut store = ParamStore::new();
    let dims = MambaDims { model: 8, inner: 16, state: 4, dt_rank: 1, conv: 4 };
    let block = MambaBlock::new(&mut store, "m", dims, &mut rng(303));
    for (name, e) in gradient_failures(&store, vec![random(&[7, 8], 304)], 12, GRAD_TOL, |g, p, v| block.forward(g, p, &v[0], 3, 2, ScanOrder::TemporalFirst)) {
        bad.push(format!("mamba {name} {e:.1e}"));
    }
    let mut store = ParamStore::new();
    let tb = TransformerBlock::new(&mut store, "t", 8, 2, &mut rng(305)).unwrap();
    for (name, e) in gradient_failures(&store, vec![random(&[6, 8], 306)], 12, GRAD_TOL, |g, p, v| tb.forward(g, p, &v[0])) {
        bad.push(format!("transformer {name} {e:.1e}"));
    }

    let cfg = micro();
    let (model, params) = BrainMT::new(&cfg).unwrap();
    let x = random(&[cfg.frames, 1, 32, 32, 32], 307);
    for (name, e) in gradient_failures(&params, vec![x], 16, GRAD_TOL, |g, p, v| {
        let out = model.forward(g, p, &v[0])?;
        model.loss(g, &out, 0.3)
    }) {
        bad.push(format!("micro model {name} {e:.1e}"));
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && secs < 300.0;
    let mut detail = format!(
        "{} ops (worst {worst_op:.1e}), conv stage, mamba, transformer, micro model ({} parameter tensors); {secs:.0} s",
        ops.len(),
        params.len()
    );
    if !bad.is_empty() {
        detail.push_str(&format!("; failing: {}", bad.join(", ")));
    }
    outcome(pass, detail)
}

/// 32^3, T = 2, C = 4, one Mamba and one transformer block.
fn micro() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.frames = 2;
    c.channels = 4;
    c.mamba_layers = 1;
    c.transformer_layers = 1;
    c.heads = 2;
    c.seed = 5;
    c
}

// ---------------------------------------------------------------- 4

fn c4_linear_memory() -> Outcome {
    let rows = run_bench(&ModelConfig::desk(), &[16, 32]).unwrap();
    let act = rows[1].activation_elements as f64 / rows[0].activation_elements as f64;
    let time = rows[1].forward_ms / rows[0].forward_ms;
    outcome(
        (1.95..=2.05).contains(&act) && (1.6..=2.6).contains(&time),
        format!(
            "activation ratio {act:.4} (L {} -> {}), forward {:.0} ms -> {:.0} ms, ratio {time:.2}",
            rows[0].tokens, rows[1].tokens, rows[0].forward_ms, rows[1].forward_ms
        ),
    )
}

// ---------------------------------------------------------------- 5

fn all_train(subjects: &[Subject]) -> DatasetSplit {
    DatasetSplit {
        train: subjects.iter().map(|s| s.id.clone()).collect(),
        val: Vec::new(),
        test: Vec::new(),
        fold_index: 0,
        repeat: 0,
    }
}

fn c5_overfit() -> Outcome {
    let mut cfg = ModelConfig::desk();
    cfg.train.max_steps = Some(200);
    let per_epoch = 8usize.div_ceil(cfg.train.batch_size);
    cfg.train.epochs = 200 / per_epoch;
    let subjects = generate_synthetic_dataset(&SyntheticSpec::new(8, cfg.dims, cfg.frames, 50)).unwrap();
    let split = all_train(&subjects);

    let run = || -> (ParamStore, f64, f64) {
        let start = Instant::now();
        let (model, params) = BrainMT::new(&cfg).unwrap();
        let state = train(&model, params, &subjects, &split, |_| {}).unwrap();
        assert_eq!(state.optimizer.step, 200);
        let ev = evaluate_indices(&model, &state.params, &subjects, &(0..8).collect::<Vec<_>>()).unwrap();
        (state.params, ev.metrics.0[0], start.elapsed().as_secs_f64())
    };
    let (a, mse, secs) = run();
    let (b, _, _) = run();
    let same = a == b;
    outcome(
        mse < 0.01 && same && secs < 600.0,
        format!("train MSE {mse:.2e} after 200 steps, rerun bit-identical: {same}, {secs:.0} s per run"),
    )
}

// ---------------------------------------------------------------- 6, 7

struct Fitted {
    r: f64,
    secs: f64,
}

fn fit_and_test(cfg: &ModelConfig, subjects: &[Subject], split: &DatasetSplit) -> Fitted {
    let start = Instant::now();
    let (model, params) = BrainMT::new(cfg).unwrap();
    let state = train(&model, params, subjects, split, |_| {}).unwrap();
    let ev = evaluate(&model, &state.best_params, subjects, &split.test).unwrap();
    Fitted {
        r: ev.metrics.0[2],
        secs: start.elapsed().as_secs_f64(),
    }
}

fn cohort() -> (Vec<Subject>, DatasetSplit) {
    let subjects = generate_synthetic_dataset(&SyntheticSpec::new(64, [32; 3], 16, 60)).unwrap();
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let split = make_splits(&ids, 60);
    (subjects, split)
}

fn c6_learnability(cohort: &(Vec<Subject>, DatasetSplit), ordered: &Fitted) -> Outcome {
    let (subjects, split) = cohort;
    let mut shuffled_cfg = ModelConfig::desk();
    shuffled_cfg.train.shuffle_frames = true;
    let shuffled = fit_and_test(&shuffled_cfg, subjects, split);
    let secs = ordered.secs + shuffled.secs;
    outcome(
        ordered.r >= 0.8 && ordered.r - shuffled.r >= 0.3 && secs < 3600.0,
        format!(
            "test R ordered {:.3}, frame-shuffled {:.3}, gap {:.3} ({} train / {} test subjects, {secs:.0} s)",
            ordered.r,
            shuffled.r,
            ordered.r - shuffled.r,
            split.train.len(),
            split.test.len()
        ),
    )
}

fn c7_window_length(cohort: &(Vec<Subject>, DatasetSplit), long: &Fitted) -> Outcome {
    let (subjects, split) = cohort;
    let mut short_cfg = ModelConfig::desk();
    short_cfg.frames = 4;
    let short = fit_and_test(&short_cfg, subjects, split);
    outcome(
        long.r > short.r + 0.1,
        format!("test R at T=16 {:.3}, at T=4 {:.3} ({:.0} s for T=4)", long.r, short.r, short.secs),
    )
}

// ---------------------------------------------------------------- 8

fn c8_metrics() -> Outcome {
    let mut fails = Vec::new();
    let r = evaluate_regression(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
    if !(r.mse == 0.0 && r.mae == 0.0 && r.r == 1.0) {
        fails.push("perfect regression");
    }
    let r = evaluate_regression(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
    if !(r.mse == 1.0 && r.mae == 1.0) {
        fails.push("zero predictor");
    }
    let r = evaluate_regression(&[-1.0, -2.0, -3.0], &[1.0, 2.0, 3.0]).unwrap();
    if r.r != -1.0 {
        fails.push("anticorrelation");
    }
    let c = evaluate_classification(&[3.0, 2.0, 1.0, 0.0], &[true, false, true, false]).unwrap();
    if c.auroc != 0.75 {
        fails.push("auroc 0.75");
    }
    let c = evaluate_classification(&[1.0, 1.0, 1.0, 1.0], &[true, false, false, false]).unwrap();
    if c.bacc != 0.5 {
        fails.push("constant predictor bacc");
    }
    let c = evaluate_classification(&[2.0, -1.0, 0.5, -3.0], &[true, false, true, false]).unwrap();
    if !(c.acc == 1.0 && c.bacc == 1.0 && c.auroc == 1.0) {
        fails.push("separable classes");
    }
    outcome(fails.is_empty(), if fails.is_empty() { "all examples exact".to_string() } else { fails.join(", ") })
}

// ---------------------------------------------------------------- 9

fn c9_integrated_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::desk();
    let (model, params) = BrainMT::new(&cfg).unwrap();
    let subjects = generate_synthetic_dataset(&SyntheticSpec::new(2, cfg.dims, cfg.frames, 90)).unwrap();
    let volume = prepare_volume(&cfg, &subjects[0], 0, None).unwrap();
    let (attr, _) = attribute_volume(&model, &params, &volume, 256).unwrap();
    let df = attr.output - attr.baseline_output;
    let complete = attr.complete();

    let x = random(&[3, 4, 5], 91);
    let base = random(&[3, 4, 5], 92);
    let w = random(&[3, 4, 5], 93);
    let lin = integrated_gradients(&LinearModel { weights: w.clone() }, &x, &base, 7).unwrap();
    let want: Vec<f64> = (0..60).map(|i| w.data()[i] * (x.data()[i] - base.data()[i])).collect();
    let lin_err = max_abs_diff(lin.values.data(), &want);
    let zero = integrated_gradients(&LinearModel { weights: w.clone() }, &x, &Tensor::zeros(&[3, 4, 5]), 5).unwrap();
    let wx: Vec<f64> = (0..60).map(|i| w.data()[i] * x.data()[i]).collect();
    let lin_err = lin_err.max(max_abs_diff(zero.values.data(), &wx));

    let xin = volume_tensor(&volume).unwrap();
    let same = integrated_gradients(&ModelOutput { model: &model, params: &params }, &xin, &xin, 4).unwrap();
    let zero_map = same.values.data().iter().all(|&v| v == 0.0);

    outcome(
        complete && lin_err < 1e-10 && zero_map,
        format!(
            "desk model m=256: residual {:.2e} vs tolerance {:.2e} (dF {df:.4}); linear max err {lin_err:.1e}; baseline map zero: {zero_map}; {:.0} s",
            attr.residual,
            1e-3 * df.abs() + 1e-6,
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn eval_in(store: &ParamStore, f: impl Fn(&Graph, &brainmt_core::params::Bound) -> brainmt_core::Result<Var>) -> Tensor {
    let g = Graph::inference();
    let p = store.bind_constant(&g);
    f(&g, &p).unwrap().value().clone()
}

fn c10_structure() -> Outcome {
    let mut notes = Vec::new();

    let mut store = ParamStore::new();
    let stage = ConvStage::new(&mut store, "s", 3, &mut rng(1000));
    zero_params(&mut store, "s.conv");
    let x = random(&[2, 3, 4, 4, 4], 1001);
    let y = eval_in(&store, |g, p| stage.body(g, p, &g.constant(x.clone())));
    let stage_ok = y.data() == x.data();
    notes.push(format!("zeroed stage body identity: {stage_ok}"));

    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "t", 8, 2, &mut rng(1002)).unwrap();
    for name in ["t.q", "t.k", "t.v", "t.out", "t.mlp1", "t.mlp2"] {
        zero_params(&mut store, name);
    }
    let x = random(&[9, 8], 1003);
    let y = eval_in(&store, |g, p| block.forward(g, p, &g.constant(x.clone())));
    let tf_ok = y.data() == x.data();
    notes.push(format!("zeroed transformer identity: {tf_ok}"));

    let mut row_err: f64 = 0.0;
    for seed in 0..20u64 {
        let (l, heads) = (1 + seed as usize % 11, 1 + seed as usize % 3);
        let q = Tensor::from_fn(&[l, heads * 4], |i| 10.0 * random(&[l * heads * 4], seed).data()[i]);
        let k = random(&[l, heads * 4], seed + 50);
        let p = attention_probabilities(&q, &k, heads).unwrap();
        for row in p.data().chunks(l) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    notes.push(format!("attention row sum err {row_err:.1e}"));

    let mut roundtrip = true;
    for (t, k) in [(1, 1), (3, 4), (5, 2), (16, 8)] {
        let body = random(&[t * k, 3], (t * k) as u64);
        for (from, to) in [(ScanOrder::SpatialFirst, ScanOrder::TemporalFirst), (ScanOrder::TemporalFirst, ScanOrder::SpatialFirst)] {
            let back = reorder(&reorder(&body, t, k, from, to).unwrap(), t, k, to, from).unwrap();
            roundtrip &= back.data() == body.data();
        }
    }
    notes.push(format!("reorder roundtrip: {roundtrip}"));

    let (t, k, z) = (3, 4, 8);
    let mut store = ParamStore::new();
    let dims = MambaDims { model: z, inner: 2 * z, state: 4, dt_rank: 1, conv: 4 };
    let mut mb = MambaBlock::new(&mut store, "m", dims, &mut rng(1004));
    mb.tie_directions();
    let x = random(&[t * k + 1, z], 1005);
    let mut eq_err: f64 = 0.0;
    for order in [ScanOrder::TemporalFirst, ScanOrder::SpatialFirst] {
        let to_scan = sequence_index(t, k, ScanOrder::SpatialFirst, order);
        let from_scan = sequence_index(t, k, order, ScanOrder::SpatialFirst);
        let len = t * k + 1;
        let flip: Vec<usize> = std::iter::once(0).chain((1..len).rev()).collect();
        let rev: Vec<usize> = (0..len).map(|i| to_scan[flip[from_scan[i]]]).collect();
        let permute = |m: &Tensor| {
            let data = rev.iter().flat_map(|&r| m.data()[r * z..(r + 1) * z].to_vec()).collect();
            Tensor::new(&[len, z], data).unwrap()
        };
        let y = eval_in(&store, |g, p| mb.forward(g, p, &g.constant(x.clone()), t, k, order));
        let xr = permute(&x);
        let yr = eval_in(&store, |g, p| mb.forward(g, p, &g.constant(xr.clone()), t, k, order));
        eq_err = eq_err.max(max_abs_diff(yr.data(), permute(&y).data()));
    }
    notes.push(format!("tied reversal equivariance err {eq_err:.1e}"));

    outcome(stage_ok && tf_ok && row_err <= 1e-12 && roundtrip && eq_err < 1e-10, notes.join("; "))
}

// ---------------------------------------------------------------- 11

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn c11_paper_preset() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::paper();
    let (model, params) = BrainMT::new(&cfg).unwrap();
    let before = peak_rss_mb();
    let [h, w, d] = cfg.dims;
    let x = random(&[cfg.frames, 1, h, w, d], 1100);
    let g = Graph::inference();
    let p = params.bind_constant(&g);
    let out = model.forward(&g, &p, &g.constant(x)).unwrap();
    let y = out.value().data()[0];
    let shape_ok = (cfg.mamba_layers, cfg.transformer_layers, cfg.state_dim, cfg.expansion, model.encoder.stages.len()) == (12, 8, 16, 2, 2);
    let rss = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.0} MB"));
    outcome(
        y.is_finite() && shape_ok,
        format!(
            "{} params, L={} tokens, output {y:.4}, {:.0} s, peak RSS {} (before forward {})",
            params.numel(),
            cfg.seq_len(),
            start.elapsed().as_secs_f64(),
            rss(peak_rss_mb()),
            rss(before)
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("BRAINMT_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));

    // the ordered T=16 model serves both 6 and 7
    let shared = std::cell::OnceCell::new();
    let data = || shared.get_or_init(cohort);
    let fitted = std::cell::OnceCell::new();
    let ordered = || {
        fitted.get_or_init(|| {
            let (subjects, split) = data();
            fit_and_test(&ModelConfig::desk(), subjects, split)
        })
    };
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "scan oracle", Box::new(c1_scan_oracle)),
        (2, "zoh discretization", Box::new(c2_zoh)),
        (3, "gradient suite", Box::new(c3_gradients)),
        (4, "linear-in-T memory", Box::new(c4_linear_memory)),
        (5, "overfit probe", Box::new(c5_overfit)),
        (6, "temporal-signal learnability", Box::new(|| c6_learnability(data(), ordered()))),
        (7, "window length ablation", Box::new(|| c7_window_length(data(), ordered()))),
        (8, "metric examples", Box::new(c8_metrics)),
        (9, "integrated gradients axioms", Box::new(c9_integrated_gradients)),
        (10, "structural invariants", Box::new(c10_structure)),
        (11, "paper preset forward pass", Box::new(c11_paper_preset)),
    ];

    let mut failed = 0;
    for (n, name, f) in &criteria {
        if !wanted(*n) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!("[{}] {n:>2} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    let run = criteria.iter().filter(|(n, _, _)| wanted(*n)).count();
    println!("acceptance: {} of {run} criteria passed", run - failed);
    if failed > 0 && std::env::var_os("BRAINMT_ACCEPT_STRICT").is_some() {
        std::process::exit(1);
    }
}
