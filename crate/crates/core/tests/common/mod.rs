//! Helpers shared by the integration tests: random problem generators and
//! scalar-loop reference implementations that do not touch the library's
//! matrix code.

#![allow(dead_code)]

use fedsim::data::{self, Dataset, PartitionParams, Scheme};
use fedsim::model::{self, Batch, ModelSpec, ParamVector};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random soft-label batch for `spec`.
pub fn random_batch(spec: &ModelSpec, rows: usize, rng: &mut ChaCha8Rng) -> Batch {
    let inputs = Array2::from_shape_fn((rows, spec.input_dim()), |_| rng.random_range(-1.0..1.0));
    let k = spec.n_classes();
    let mut targets = Array2::from_shape_fn((rows, k), |_| rng.random_range(0.05..1.0));
    for mut row in targets.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Batch::new(inputs, targets).unwrap()
}

pub fn random_params(spec: &ModelSpec, rng: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    ParamVector::from_vec((0..spec.param_count()).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Small random architecture: 1 to 3 weight layers, widths 1..=5, 2..=4 classes.
pub fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let layers = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=5)];
    for _ in 1..layers {
        dims.push(rng.random_range(1..=5));
    }
    dims.push(rng.random_range(2..=4));
    ModelSpec::new(dims).unwrap()
}

// ---- scalar linear-softmax reference (logits_k = sum_j x_j W[j][k] + b_k) ----

pub fn lin_probs(params: &[f64], d: usize, k: usize, x: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; k];
    for (c, zc) in z.iter_mut().enumerate() {
        let mut acc = params[d * k + c];
        for j in 0..d {
            acc += x[j] * params[j * k + c];
        }
        *zc = acc;
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn lin_example_loss(params: &[f64], d: usize, k: usize, x: &[f64], y: &[f64]) -> f64 {
    let p = lin_probs(params, d, k, x);
    let mut l = 0.0;
    for c in 0..k {
        if y[c] != 0.0 {
            l -= y[c] * (p[c] + model::LOG_EPS).ln();
        }
    }
    l.max(0.0)
}

pub fn lin_loss(params: &[f64], d: usize, k: usize, b: &Batch) -> f64 {
    let n = b.len();
    let mut total = 0.0;
    for i in 0..n {
        let x: Vec<f64> = b.inputs.row(i).to_vec();
        let y: Vec<f64> = b.targets.row(i).to_vec();
        total += lin_example_loss(params, d, k, &x, &y);
    }
    total / n as f64
}

/// Per-example parameter gradient (LOG_EPS ignored).
pub fn lin_example_grad(params: &[f64], d: usize, k: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
    let p = lin_probs(params, d, k, x);
    let ysum: f64 = y.iter().sum();
    let mut g = vec![0.0; (d + 1) * k];
    for c in 0..k {
        let delta = p[c] * ysum - y[c];
        for j in 0..d {
            g[j * k + c] = x[j] * delta;
        }
        g[d * k + c] = delta;
    }
    g
}

pub fn lin_grad(params: &[f64], d: usize, k: usize, b: &Batch) -> Vec<f64> {
    let n = b.len();
    let mut g = vec![0.0; (d + 1) * k];
    for i in 0..n {
        let x: Vec<f64> = b.inputs.row(i).to_vec();
        let y: Vec<f64> = b.targets.row(i).to_vec();
        for (acc, v) in g.iter_mut().zip(lin_example_grad(params, d, k, &x, &y)) {
            *acc += v / n as f64;
        }
    }
    g
}

/// Input gradient of the batch-mean loss, one row per example.
pub fn lin_input_grad(params: &[f64], d: usize, k: usize, b: &Batch) -> Vec<Vec<f64>> {
    let n = b.len() as f64;
    (0..b.len())
        .map(|i| {
            let x: Vec<f64> = b.inputs.row(i).to_vec();
            let y: Vec<f64> = b.targets.row(i).to_vec();
            let p = lin_probs(params, d, k, &x);
            let ysum: f64 = y.iter().sum();
            (0..d)
                .map(|j| (0..k).map(|c| (p[c] * ysum - y[c]) * params[j * k + c]).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1)`, the largest over coordinates.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

// ---- half-space projection reference ----

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean projection of `x` onto `{theta : (anchor - theta) . g >= 0}`
/// restricted to the ray `x - w g`, found by bisection on the constraint.
/// Returns the multiplier `w`.
pub fn halfspace_qp(x: &[f64], anchor: &[f64], g: &[f64]) -> f64 {
    let slack = |w: f64| -> f64 {
        anchor.iter().zip(x).zip(g).map(|((a, xi), gi)| (a - (xi - w * gi)) * gi).sum()
    };
    if dot(g, g).sqrt() < 1e-12 || slack(0.0) >= 0.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    while slack(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slack(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

// ---- shared experiment fixtures ----

/// Class-major split of `all` into the first `n_train` and the next rows of every class.
pub fn split_per_class(all: &Dataset, per_class: usize, n_train: usize) -> (Dataset, Dataset) {
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for c in 0..all.n_classes {
        tr.extend(c * per_class..c * per_class + n_train);
        te.extend(c * per_class + n_train..(c + 1) * per_class);
    }
    let make = |idx: &[usize]| {
        Dataset::new(all.features.select(Axis(0), idx), all.labels_at(idx), all.n_classes).unwrap()
    };
    (make(&tr), make(&te))
}

/// Two-class blobs in 2-D, 50 train and 50 test examples per class.
pub fn forgetting_fixture(seed: u64) -> (Dataset, Dataset, data::ClientPartition) {
    let all = data::synth_blobs(2, 2, 100, 0.3, seed).unwrap();
    let (train, test) = split_per_class(&all, 100, 50);
    let part = data::partition(&train, Scheme::OneClass, 10, seed, &PartitionParams::default()).unwrap();
    (train, test, part)
}
