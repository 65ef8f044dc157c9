mod common;

use common::*;
use fedsim::fedreg::{self, FedRegConfig};
use fedsim::fl::{self, Algorithm, LocalTrainConfig};
use fedsim::model::{Batch, ModelSpec, ParamVector};
use rand::Rng;

/// No feasible point sampled near `x` is closer than `proj`.
fn is_nearest_feasible(x: &[f64], anchor: &[f64], g: &[f64], proj: &[f64], rng: &mut rand_chacha::ChaCha8Rng) -> bool {
    let d_proj: f64 = x.iter().zip(proj).map(|(a, b)| (a - b).powi(2)).sum();
    for _ in 0..200 {
        let cand: Vec<f64> = proj.iter().map(|p| p + rng.random_range(-0.5..0.5)).collect();
        let feasible = anchor.iter().zip(&cand).zip(g).map(|((a, c), gi)| (a - c) * gi).sum::<f64>() >= 0.0;
        let d: f64 = x.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum();
        if feasible && d < d_proj - 1e-9 {
            return false;
        }
    }
    true
}

#[test]
fn project_weights_matches_brute_force_qp() {
    let mut r = rng(42);
    for case in 0..200 {
        let n = r.random_range(2..=5);
        let v = |r: &mut rand_chacha::ChaCha8Rng| (0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (local, anchor, g_s, g_p) = (v(&mut r), v(&mut r), v(&mut r), v(&mut r));
        let pv = |x: &Vec<f64>| ParamVector::from_vec(x.clone());
        let (w_s, w_p) = fedreg::project_weights(&pv(&local), &pv(&anchor), &pv(&g_s), &pv(&g_p)).unwrap();

        let want_s = halfspace_qp(&local, &anchor, &g_s);
        let after_s: Vec<f64> = local.iter().zip(&g_s).map(|(x, g)| x - want_s * g).collect();
        let want_p = halfspace_qp(&after_s, &anchor, &g_p);
        assert!((w_s - want_s).abs() < 1e-6, "case {case}: w_s {w_s} vs {want_s}");
        assert!((w_p - want_p).abs() < 1e-6, "case {case}: w_p {w_p} vs {want_p}");

        let theta_s: Vec<f64> = local.iter().zip(&g_s).map(|(x, g)| x - w_s * g).collect();
        let diff: Vec<f64> = anchor.iter().zip(&theta_s).map(|(a, t)| a - t).collect();
        assert!(dot(&diff, &g_s) >= -1e-9, "case {case}: g_s constraint violated");
        let theta_p: Vec<f64> = theta_s.iter().zip(&g_p).map(|(x, g)| x - w_p * g).collect();
        let diff: Vec<f64> = anchor.iter().zip(&theta_p).map(|(a, t)| a - t).collect();
        assert!(dot(&diff, &g_p) >= -1e-9, "case {case}: g_p constraint violated");

        assert!(is_nearest_feasible(&local, &anchor, &g_s, &theta_s, &mut r), "case {case}: not nearest");
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn scalar_ascent(p: &[f64], d: usize, k: usize, b: &Batch, eta: f64, steps: usize) -> Batch {
    let mut work = b.clone();
    for _ in 0..steps {
        let g = lin_input_grad(p, d, k, &work);
        for (i, row) in g.iter().enumerate() {
            for (j, &gj) in row.iter().enumerate().take(d) {
                work.inputs[[i, j]] += eta * sign(gj);
            }
        }
    }
    work
}

fn mix(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect()
}

/// FedReg local training for a linear-softmax model written with scalar loops.
fn scripted_fedreg(
    anchor: &[f64],
    d: usize,
    k: usize,
    shard: &Batch,
    batches: &[Vec<usize>],
    lr: f64,
    reg: &FedRegConfig,
) -> Vec<f64> {
    let mut pseudo = scalar_ascent(anchor, d, k, shard, reg.eta_s, reg.fgsm_steps);
    for i in 0..pseudo.len() {
        let p = lin_probs(anchor, d, k, &pseudo.inputs.row(i).to_vec());
        for (c, &pc) in p.iter().enumerate() {
            pseudo.targets[[i, c]] = pc;
        }
    }
    let perturbed = scalar_ascent(anchor, d, k, shard, reg.eta_p, reg.fgsm_steps);
    let mut uniform = pseudo.clone();
    uniform.targets.fill(1.0 / k as f64);

    let mut theta = anchor.to_vec();
    for idx in batches {
        let at = mix(&theta, anchor, reg.gamma);
        let mut g = lin_grad(&at, d, k, &shard.select(idx));
        if reg.use_mg {
            let gp = lin_grad(&at, d, k, &uniform.select(idx));
            let c = dot(&g, &gp) / dot(&gp, &gp);
            for (gi, pi) in g.iter_mut().zip(&gp) {
                *gi -= c * pi;
            }
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= lr * gi;
        }
        let mid = mix(&theta, anchor, 0.5);
        let gs = lin_grad(&mid, d, k, &pseudo.select(idx));
        let gpp = lin_grad(&mid, d, k, &perturbed.select(idx));
        let disp: Vec<f64> = theta.iter().zip(anchor).map(|(t, a)| t - a).collect();
        let ws = (dot(&disp, &gs) / dot(&gs, &gs)).max(0.0);
        let shifted: Vec<f64> = disp.iter().zip(&gs).map(|(x, g)| x - ws * g).collect();
        let wp = (dot(&shifted, &gpp) / dot(&gpp, &gpp)).max(0.0);
        for i in 0..theta.len() {
            theta[i] -= ws * gs[i] + wp * gpp[i];
        }
    }
    theta
}

#[test]
fn local_training_matches_scripted_oracle() {
    for (seed, use_mg) in [(0u64, false), (1, true), (2, false), (3, true)] {
        let mut r = rng(seed);
        let (d, k) = (3, 3);
        let spec = ModelSpec::new(vec![d, k]).unwrap();
        let anchor = random_params(&spec, &mut r, 0.7);
        let shard = random_batch(&spec, 7, &mut r);
        let reg = FedRegConfig { use_mg, ..FedRegConfig::new(0.4, 0.05) };
        let cfg = LocalTrainConfig::new(Algorithm::FedReg(reg), 3, 3, 0.2);

        let mut order_rng = rng(1000 + seed);
        let batches: Vec<Vec<usize>> = (0..cfg.epochs)
            .flat_map(|_| fl::epoch_batches(shard.len(), cfg.batch_size, &mut order_rng))
            .collect();
        let want = scripted_fedreg(anchor.as_slice(), d, k, &shard, &batches, cfg.learning_rate, &reg);

        let (mut shuffle, mut noise) = (rng(1000 + seed), rng(7));
        let (got, art) = fedreg::local_train_fedreg(&spec, &anchor, &shard, &cfg, &reg, &mut shuffle, &mut noise).unwrap();
        assert_eq!(art.weights.len(), batches.len());
        let e = max_abs_diff(got.as_slice(), &want);
        assert!(e < 1e-12, "seed {seed} mg {use_mg}: max diff {e:e}");
    }
}

#[test]
fn mg_step_is_orthogonal_to_uniform_label_gradient() {
    let mut r = rng(5);
    let spec = ModelSpec::new(vec![4, 6, 3]).unwrap();
    let params = random_params(&spec, &mut r, 0.6);
    for _ in 0..20 {
        let shard = random_batch(&spec, 5, &mut r);
        let pseudo = fedreg::gen_pseudo(&spec, &params, &shard, 0.1, 10, false).unwrap();
        let uniform = fedreg::build_uniform_label_set(&pseudo, 3).unwrap();
        let g = fedsim::model::grad_params(&spec, &params, &shard).unwrap();
        let gp = fedsim::model::grad_params(&spec, &params, &uniform).unwrap();
        let mg = fedreg::modified_gradient(&g, &gp).unwrap();
        let cos = mg.dot(&gp).unwrap() / (mg.norm() * gp.norm());
        assert!(cos.abs() < 1e-12, "cosine {cos:e}");
    }
}
