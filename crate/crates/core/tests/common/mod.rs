#![allow(dead_code)]

use batsel::data::{LabeledExample, Split};
use batsel::influence::{build_curvature, CurvatureMode, GradientBundle};
use batsel::model::{grad_per_layer, loss, Activation, Head, LossSpec, ModelParameters, ModelSpec};
use batsel::rng::{rng_from, StageRng};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_vec(rng: &mut StageRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// Logistic data with labels drawn from `sigmoid(w·x)`.
pub fn logistic_rows(prefix: &str, n: usize, w: &[f64], rng: &mut StageRng, split: Split) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| {
            let x = normal_vec(rng, w.len());
            let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            let y = if rng.random::<f64>() < 1.0 / (1.0 + (-z).exp()) { 1.0 } else { 0.0 };
            LabeledExample::new(format!("{prefix}{i:04}"), x, y, split)
        })
        .collect()
}

/// The logistic benchmark: d = 10, 200 training rows, 50 validation rows,
/// a pool of 100.
pub struct LogisticBench {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub pool: Vec<LabeledExample>,
}

pub fn logistic_bench(seed: u64) -> LogisticBench {
    let mut rng = rng_from(seed);
    let w = normal_vec(&mut rng, 10);
    LogisticBench {
        train: logistic_rows("t", 200, &w, &mut rng, Split::Adaptation),
        validation: logistic_rows("v", 50, &w, &mut rng, Split::Validation),
        pool: logistic_rows("b", 100, &w, &mut rng, Split::Backbone),
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn example_for(head: Head, x: Vec<f64>, k: usize) -> LabeledExample {
    let y = match head {
        Head::LogisticBinary => (k % 2) as f64,
        Head::Softmax => (k % 3) as f64,
        Head::Linear => 0.3 * k as f64 - 1.0,
    };
    LabeledExample::new(format!("e{k}"), x, y, Split::Adaptation)
}

fn fd_gradient(spec: &ModelSpec, params: &ModelParameters, ex: &LabeledExample, ls: &LossSpec, h: f64) -> Vec<f64> {
    let mut flat = params.flatten();
    let mut out = Vec::with_capacity(flat.len());
    for j in 0..flat.len() {
        let orig = flat[j];
        flat[j] = orig + h;
        let lp = loss(spec, &ModelParameters::from_flat(spec, &flat).unwrap(), ex, ls, 1, &mut rng_from(0)).unwrap();
        flat[j] = orig - h;
        let lm = loss(spec, &ModelParameters::from_flat(spec, &flat).unwrap(), ex, ls, 1, &mut rng_from(0)).unwrap();
        flat[j] = orig;
        out.push((lp - lm) / (2.0 * h));
    }
    out
}

/// Relative error of the analytic gradient against central differences.
/// Case `k` cycles heads and activations with zero to two hidden layers.
pub fn gradient_case(k: usize) -> f64 {
    let heads = [Head::LogisticBinary, Head::Softmax, Head::Linear];
    let acts = [Activation::Identity, Activation::Tanh, Activation::Relu];
    let head = heads[k % 3];
    let act = acts[(k / 3) % 3];
    let mut rng = rng_from(1000 + k as u64);
    let d = 2 + k % 4;
    let hidden: Vec<usize> = match k % 5 {
        0 => vec![],
        1 | 2 => vec![3],
        _ => vec![4, 3],
    };
    let out = if head == Head::Softmax { 3 } else { 1 };
    let spec = if hidden.is_empty() {
        ModelSpec::new(vec![(d, out)], act, head).unwrap()
    } else {
        ModelSpec::mlp(d, &hidden, out, act, head).unwrap()
    };
    let flat: Vec<f64> = normal_vec(&mut rng, spec.total_dim()).iter().map(|v| 0.5 * v).collect();
    let params = ModelParameters::from_flat(&spec, &flat).unwrap();
    let ls = match head {
        Head::Linear => LossSpec::squared_error(),
        _ => LossSpec::log_loss(),
    }
    .with_l2(0.01 * (k % 2) as f64);
    let ex = example_for(head, normal_vec(&mut rng, d), k);
    let g: Vec<f64> = grad_per_layer(&spec, &params, &ex, &ls, 1, &mut rng_from(0))
        .unwrap()
        .into_iter()
        .flatten()
        .collect();
    rel_err(&g, &fd_gradient(&spec, &params, &ex, &ls, 1e-5))
}

pub fn random_bundle(n: usize, dims: &[usize], seed: u64) -> GradientBundle {
    let mut rng = rng_from(seed);
    let rows = (0..n).map(|_| dims.iter().map(|&d| normal_vec(&mut rng, d)).collect()).collect();
    GradientBundle::from_rows((0..n).map(|i| format!("g{i:03}")).collect(), rows, dims, 1).unwrap()
}

pub fn dense_solve(bundle: &GradientBundle, layer: usize, lam: f64, v: &[f64]) -> Vec<f64> {
    let g = &bundle.grads[layer];
    let mut m = g.transpose() * g / bundle.len() as f64;
    for i in 0..m.nrows() {
        m[(i, i)] += lam;
    }
    m.lu().solve(&DVector::from_column_slice(v)).unwrap().iter().copied().collect()
}

/// Worst relative error of the implicit inverse against a dense solve for a
/// single-row bundle over two layers.
pub fn rank_one_case(case: u64) -> f64 {
    let dims = [1 + (case as usize % 7), 3 + (case as usize % 11)];
    let b = random_bundle(1, &dims, case);
    let lambdas = [0.05 + 0.01 * case as f64, 1.0 / (1.0 + case as f64)];
    let op = build_curvature(&b, &lambdas, CurvatureMode::SmImplicit).unwrap();
    dims.iter()
        .enumerate()
        .map(|(l, &d)| {
            let v = normal_vec(&mut rng_from(10_000 + case), d);
            rel_err(&op.apply_inverse(l, &v).unwrap(), &dense_solve(&b, l, lambdas[l], &v))
        })
        .fold(0.0, f64::max)
}
