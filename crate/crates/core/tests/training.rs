use brainmt_core::checkpoint::Checkpoint;
use brainmt_core::config::{ModelConfig, Task};
use brainmt_core::cv::run_cv;
use brainmt_core::dataset::make_splits;
use brainmt_core::ig::{integrated_gradients, LinearModel, ModelOutput};
use brainmt_core::model::{volume_tensor, BrainMT};
use brainmt_core::optim::{lr_schedule, AdamW};
use brainmt_core::synthetic::{generate_synthetic_dataset, Subject, SyntheticSpec};
use brainmt_core::train::{frame_permutation, prepare_volume, train, TrainState};
use brainmt_core::BrainError;
use brainmt_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn micro() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.frames = 2;
    c.channels = 4;
    c.mamba_layers = 1;
    c.transformer_layers = 1;
    c.heads = 2;
    c.seed = 8;
    c.train.epochs = 2;
    c.train.warmup_epochs = 1;
    c.train.batch_size = 2;
    c
}

fn subjects(n: usize) -> Vec<Subject> {
    generate_synthetic_dataset(&SyntheticSpec::new(n, [32, 32, 32], 8, 4)).unwrap()
}

fn fit(cfg: &ModelConfig, data: &[Subject]) -> TrainState {
    let (model, params) = BrainMT::new(cfg).unwrap();
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    train(&model, params, data, &make_splits(&ids, cfg.seed), |_| {}).unwrap()
}

#[test]
fn schedule_landmarks() {
    let (base, warm, total) = (2e-4, 50, 250);
    assert_eq!(lr_schedule(0, base, warm, total), 0.0);
    assert!((lr_schedule(warm, base, warm, total) - 2e-4).abs() < 1e-18);
    assert!((lr_schedule(150, base, warm, total) - 1e-4).abs() < 1e-15);
    assert!(lr_schedule(total, base, warm, total).abs() < 1e-18);
    assert!((lr_schedule(25, base, warm, total) - 1e-4).abs() < 1e-18);
}

#[test]
fn adamw_first_step_is_sign_sized() {
    let mut store = brainmt_core::params::ParamStore::new();
    store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let mut opt = AdamW::new(&store, 0.1);
    let g = Tensor::new(&[3], vec![0.3, -4.0, 0.0]).unwrap();
    opt.update(&mut store, &[g], 0.01).unwrap();
    // m_hat = g and v_hat = g^2, so the step is lr * sign(g) up to eps
    let w = store.tensors()[0].data();
    let decay = 1.0 - 0.01 * 0.1;
    let want = [1.0 * decay - 0.01, -2.0 * decay + 0.01, 0.5 * decay];
    for i in 0..3 {
        assert!((w[i] - want[i]).abs() < 1e-9, "{i}: {} vs {}", w[i], want[i]);
    }
}

#[test]
fn training_is_deterministic_and_weight_decay_matters() {
    let data = subjects(5);
    let mut cfg = micro();
    cfg.train.max_steps = Some(10);
    cfg.train.epochs = 10;
    cfg.train.batch_size = 1;
    let a = fit(&cfg, &data);
    let b = fit(&cfg, &data);
    assert_eq!(a, b);
    assert_eq!(a.optimizer.step, 10);

    cfg.train.weight_decay = 0.0;
    let c = fit(&cfg, &data);
    assert_ne!(a.params, c.params);
    let norm = |s: &TrainState| s.params.tensors().iter().map(|t| t.dot(t)).sum::<f64>();
    assert!(norm(&a) < norm(&c));
}

#[test]
fn shuffled_control_permutes_frames() {
    let data = subjects(2);
    let mut cfg = micro();
    cfg.frames = 8;
    cfg.train.shuffle_frames = true;
    let perm = frame_permutation(8, cfg.seed, 1);
    let mut sorted = perm.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    assert_ne!(perm, sorted);
    let v = prepare_volume(&cfg, &data[1], 1, None).unwrap();
    for (t, &p) in perm.iter().enumerate() {
        assert_eq!(v.frame(t), data[1].volume.frame(p));
    }
    assert_eq!(v, prepare_volume(&cfg, &data[1], 1, None).unwrap());
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let data = subjects(4);
    let mut cfg = micro();
    cfg.train.epochs = 1;
    let state = fit(&cfg, &data);
    let ck = Checkpoint { config: cfg, state };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    // metrics of tiny splits can be NaN, so compare the printed form
    assert_eq!(format!("{:?}", Checkpoint::load(&path).unwrap()), format!("{ck:?}"));

    let bytes = ck.to_bytes().unwrap();
    let p = Path::new("m.ckpt");
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], p), Err(BrainError::Truncated { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT", p), Err(BrainError::BadMagic { .. })));
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0, 0]);
    assert!(Checkpoint::from_bytes(&extra, p).is_err());
    let mut version = bytes;
    version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version, p), Err(BrainError::Parse { .. })));
}

#[test]
fn cross_validation_repeats_are_reproducible() {
    let data = subjects(6);
    let mut cfg = micro();
    cfg.train.epochs = 1;
    cfg.task = Task::Classification;
    let a = run_cv(&cfg, &data, 3, 2, |_| {}).unwrap();
    let b = run_cv(&cfg, &data, 3, 2, |_| {}).unwrap();
    assert_eq!(a.folds.len(), 6);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(a.summary[0].name, "loss");
}

#[test]
fn ig_of_linear_model_is_weight_times_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-2.0..2.0));
    let x = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-2.0..2.0));
    let model = LinearModel { weights: w.clone() };
    for steps in [1, 7, 64] {
        let a = integrated_gradients(&model, &x, &Tensor::zeros(&[4, 5]), steps).unwrap();
        for i in 0..20 {
            assert!((a.values.data()[i] - w.data()[i] * x.data()[i]).abs() < 1e-10);
        }
        assert!(a.complete());
    }
    let same = integrated_gradients(&model, &x, &x, 16).unwrap();
    assert!(same.values.data().iter().all(|&v| v == 0.0));
    assert!(integrated_gradients(&model, &x, &x, 0).is_err());
}

#[test]
fn ig_on_network_is_complete_and_zero_at_baseline() {
    let cfg = micro();
    let (model, params) = BrainMT::new(&cfg).unwrap();
    let data = subjects(1);
    let v = prepare_volume(&cfg, &data[0], 0, None).unwrap();
    let x = volume_tensor(&v).unwrap();
    let out = ModelOutput { model: &model, params: &params };
    let base = x.map(|_| -1.0);
    let coarse = integrated_gradients(&out, &x, &base, 128).unwrap();
    let fine = integrated_gradients(&out, &x, &base, 256).unwrap();
    assert!(fine.residual < coarse.residual, "{} vs {}", fine.residual, coarse.residual);
    assert!(fine.complete(), "residual {} for gap {}", fine.residual, fine.output - fine.baseline_output);
    assert!(fine.residual < 1e-3 * (fine.output - fine.baseline_output).abs() + 1e-6);

    let zero = integrated_gradients(&out, &x, &x, 4).unwrap();
    assert!(zero.values.data().iter().all(|&v| v == 0.0));
}
