#![allow(dead_code)]

use brainmt_core::params::{Bound, ParamStore};
use brainmt_tensor::gradcheck::{project, GradCheck};
use brainmt_tensor::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn to_tensor_err(e: brainmt_core::BrainError) -> TensorError {
    TensorError::Backward(e.to_string())
}

/// Worst relative error over `inputs` followed by every parameter of `store`,
/// for the scalar projection of `f`'s output. Returns `(index, error)` pairs
/// above `tol` (inputs first, then parameters by name).
pub fn gradient_failures<F>(store: &ParamStore, inputs: Vec<Tensor>, coords: usize, tol: f64, f: F) -> Vec<(String, f64)>
where
    F: Fn(&Graph, &Bound, &[Var]) -> brainmt_core::Result<Var>,
{
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(store.tensors().iter().cloned());
    let names: Vec<String> = (0..n_in)
        .map(|i| format!("input {i}"))
        .chain(store.iter().map(|(n, _)| n.to_string()))
        .collect();
    let check = GradCheck {
        max_coords: Some(coords),
        ..GradCheck::default()
    };
    let reports = check
        .run(&all, |g, v| {
            let p = Bound::from_vars(v[n_in..].to_vec());
            let y = f(g, &p, &v[..n_in]).map_err(to_tensor_err)?;
            project(g, &y, 17)
        })
        .unwrap();
    reports
        .into_iter()
        // a gradient that is identically zero (e.g. a key bias under softmax)
        // leaves only difference noise; judge it by absolute size
        .filter(|r| {
            let vanishing = r.analytic_norm < 1e-12 && r.relative_error * check.floor < 1e-9;
            !(r.relative_error < tol || vanishing)
        })
        .map(|r| (names[r.index].clone(), r.relative_error))
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
