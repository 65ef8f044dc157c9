//! DPSGD noise mechanism, gradient inversion attack and reconstruction
//! quality metrics.
//!
//! The attack observes the parameter change `delta = -lr * g(theta; x, y)` of
//! a single local step on one example and searches for an input whose
//! simulated plain update matches it. The input gradient of the matching
//! distance needs the mixed derivative `(d g / d x)^T u`; it is obtained as
//! the directional derivative `d/de grad_x L(theta + e u; x)` by a central
//! difference in `e`, so only first-order backprop is required.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedreg;
use crate::model::{self, Batch, ModelSpec, ParamVector};
use crate::rng::{self, Purpose};

/// PSNR written for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub clip_bound: f64,
    pub noise_scale: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_bound > 0.0) || !self.clip_bound.is_finite() {
            return Err(Error::invalid("clip_bound", "must be positive"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::invalid("noise_scale", "must be >= 0"));
        }
        Ok(())
    }
}

/// `g * min(1, C / |g|)`, with the result guaranteed to satisfy `|out| <= C`
/// in floating point.
pub fn clip(g: &ParamVector, clip_bound: f64) -> ParamVector {
    let norm = g.norm();
    if norm <= clip_bound {
        return g.clone();
    }
    let mut out = g.scaled(clip_bound / norm);
    while out.norm() > clip_bound {
        out.scale(1.0 - f64::EPSILON);
    }
    out
}

/// Clips to norm `C`, then adds i.i.d. `N(0, (sigma C)^2)` noise per coordinate.
pub fn clip_and_noise<R: Rng + ?Sized>(g: &ParamVector, dp: &DpConfig, rng: &mut R) -> Result<ParamVector> {
    dp.validate()?;
    let mut out = clip(g, dp.clip_bound);
    let std = dp.noise_scale * dp.clip_bound;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
        for v in out.as_mut_slice() {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

/// Anisotropic TV: `sum |x[i+1,j] - x[i,j]| + sum |x[i,j+1] - x[i,j]|`.
pub fn total_variation(x: ArrayView2<f64>) -> f64 {
    let (h, w) = x.dim();
    let mut tv = 0.0;
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                tv += (x[[i + 1, j]] - x[[i, j]]).abs();
            }
            if j + 1 < w {
                tv += (x[[i, j + 1]] - x[[i, j]]).abs();
            }
        }
    }
    tv
}

fn tv_subgradient(x: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut g = Array2::zeros((h, w));
    let sgn = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                let s = sgn(x[[i + 1, j]] - x[[i, j]]);
                g[[i + 1, j]] += s;
                g[[i, j]] -= s;
            }
            if j + 1 < w {
                let s = sgn(x[[i, j + 1]] - x[[i, j]]);
                g[[i, j + 1]] += s;
                g[[i, j]] -= s;
            }
        }
    }
    g
}

/// `10 log10(max^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr(x: &[f64], reference: &[f64], max_value: f64) -> Result<f64> {
    if x.len() != reference.len() {
        return Err(Error::dim("psnr inputs", reference.len(), x.len()));
    }
    if x.is_empty() {
        return Err(Error::invalid("psnr", "empty images"));
    }
    let mse = x
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

pub fn psnr_capped(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Cosine,
    L2,
}

/// Distance between the observed update `a` and a candidate `b`, plus its
/// gradient w.r.t. `b`. Cosine distance of a zero-norm vector is 1.
pub fn update_distance(a: &ParamVector, b: &ParamVector, distance: Distance) -> Result<(f64, ParamVector)> {
    match distance {
        Distance::L2 => {
            let diff = b.sub(a)?;
            Ok((diff.dot(&diff)?, diff.scaled(2.0)))
        }
        Distance::Cosine => {
            let (na, nb) = (a.norm(), b.norm());
            let ab = a.dot(b)?;
            if na == 0.0 || nb == 0.0 {
                return Ok((1.0, ParamVector::zeros(a.len())));
            }
            let cos = ab / (na * nb);
            // d/db [-(a.b)/(|a||b|)] = -a/(|a||b|) + (a.b) b/(|a||b|^3)
            let mut grad = a.scaled(-1.0 / (na * nb));
            grad.add_scaled(ab / (na * nb * nb * nb), b)?;
            Ok((1.0 - cos, grad))
        }
    }
}

/// How a client turns one example into its transmitted update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Defense {
    /// One plain gradient step (FedAvg, FedProx, FedCurv and SGD coincide here).
    Plain,
    Dpsgd(DpConfig),
    /// FedReg step with the modified gradient; `theta_gamma = theta` on the
    /// first local step.
    FedRegMg { eta_s: f64, fgsm_steps: usize },
}

/// Parameter change of one local step from `theta` on `example`.
pub fn simulated_update<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &ParamVector,
    example: &Batch,
    learning_rate: f64,
    defense: &Defense,
    rng: &mut R,
) -> Result<ParamVector> {
    let g = model::grad_params(spec, theta, example)?;
    let step = match defense {
        Defense::Plain => g,
        Defense::Dpsgd(dp) => clip_and_noise(&g, dp, rng)?,
        Defense::FedRegMg { eta_s, fgsm_steps } => {
            let pseudo = fedreg::gen_pseudo(spec, theta, example, *eta_s, *fgsm_steps, false)?;
            let uniform = fedreg::build_uniform_label_set(&pseudo, spec.n_classes())?;
            let g_prime = model::grad_params(spec, theta, &uniform)?;
            let mg = fedreg::modified_gradient(&g, &g_prime)?;
            let scale = mg.norm() * g_prime.norm();
            if scale > 0.0 && (mg.dot(&g_prime)? / scale).abs() > 1e-12 {
                return Err(Error::Numeric("modified gradient is not orthogonal".into()));
            }
            mg
        }
    };
    Ok(step.scaled(-learning_rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `x0.1` at 3/8, 5/8 and 7/8 of the iterations.
    MultiStep,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, iteration: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::MultiStep => {
                let milestones = [3 * total / 8, 5 * total / 8, 7 * total / 8];
                let passed = milestones.iter().filter(|&&m| iteration >= m && m > 0).count();
                base * 0.1f64.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub iterations: usize,
    pub distance: Distance,
    pub tv_weight: f64,
    pub step_size: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Keep candidates inside `[0, 1]`.
    pub clamp: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 2000,
            distance: Distance::L2,
            tv_weight: 1e-8,
            step_size: 1.0,
            schedule: LrSchedule::MultiStep,
            seed: 0,
            clamp: true,
        }
    }
}

/// What the attacker knows: the model, the parameters the update started
/// from, the local learning rate and the observed update.
#[derive(Debug, Clone, Copy)]
pub struct AttackProblem<'a> {
    pub spec: &'a ModelSpec,
    pub theta: &'a ParamVector,
    pub learning_rate: f64,
    pub observed: &'a ParamVector,
    pub height: usize,
    pub width: usize,
}

impl AttackProblem<'_> {
    fn check(&self, x: &[f64], label: usize) -> Result<()> {
        if x.len() != self.spec.input_dim() || self.height * self.width != x.len() {
            return Err(Error::dim("candidate size", self.height * self.width, x.len()));
        }
        if label >= self.spec.n_classes() {
            return Err(Error::invalid("label", "out of range"));
        }
        if self.observed.len() != self.spec.param_count() {
            return Err(Error::dim("observed update", self.spec.param_count(), self.observed.len()));
        }
        Ok(())
    }

    fn example(&self, x: &[f64], label: usize) -> Batch {
        let inputs = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        let mut targets = Array2::zeros((1, self.spec.n_classes()));
        targets[[0, label]] = 1.0;
        Batch { inputs, targets }
    }

    fn image<'x>(&self, x: &'x [f64]) -> ArrayView2<'x, f64> {
        ArrayView2::from_shape((self.height, self.width), x).unwrap()
    }

    fn candidate_update(&self, example: &Batch) -> Result<ParamVector> {
        Ok(model::grad_params(self.spec, self.theta, example)?.scaled(-self.learning_rate))
    }
}

/// `Distance(observed, -lr g(theta; x, label)) + w TV(x)`.
pub fn attack_objective(problem: &AttackProblem<'_>, x: &[f64], label: usize, cfg: &AttackConfig) -> Result<f64> {
    problem.check(x, label)?;
    let candidate = problem.candidate_update(&problem.example(x, label))?;
    let (d, _) = update_distance(problem.observed, &candidate, cfg.distance)?;
    Ok(d + cfg.tv_weight * total_variation(problem.image(x)))
}

/// Objective and its gradient w.r.t. the candidate input.
pub fn attack_objective_grad(
    problem: &AttackProblem<'_>,
    x: &[f64],
    label: usize,
    cfg: &AttackConfig,
) -> Result<(f64, Vec<f64>)> {
    problem.check(x, label)?;
    let example = problem.example(x, label);
    let candidate = problem.candidate_update(&example)?;
    let (d, dd_dcandidate) = update_distance(problem.observed, &candidate, cfg.distance)?;
    let objective = d + cfg.tv_weight * total_variation(problem.image(x));

    let mut grad = vec![0.0; x.len()];
    let u_norm = dd_dcandidate.norm();
    if u_norm > 0.0 {
        // (d candidate / d x)^T u = -lr * d/de grad_x L(theta + e u; x)
        let eps = 1e-5 * (1.0 + problem.theta.norm()) / u_norm;
        let plus = problem.theta.axpy(eps, &dd_dcandidate)?;
        let minus = problem.theta.axpy(-eps, &dd_dcandidate)?;
        let gp = model::grad_inputs(problem.spec, &plus, &example)?;
        let gm = model::grad_inputs(problem.spec, &minus, &example)?;
        for (k, g) in grad.iter_mut().enumerate() {
            *g = -problem.learning_rate * (gp[[0, k]] - gm[[0, k]]) / (2.0 * eps);
        }
    }
    if cfg.tv_weight != 0.0 {
        let tv = tv_subgradient(problem.image(x));
        for (g, t) in grad.iter_mut().zip(tv.iter()) {
            *g += cfg.tv_weight * t;
        }
    }
    Ok((objective, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub input: Vec<f64>,
    pub label: usize,
    pub objective: f64,
    /// Best objective seen after each iteration (winning label).
    pub best_trace: Vec<f64>,
    pub restarts: usize,
    pub psnr_db: Option<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

struct Descent {
    best_x: Vec<f64>,
    best: f64,
    trace: Vec<f64>,
}

fn descend_label(
    problem: &AttackProblem<'_>,
    label: usize,
    cfg: &AttackConfig,
    init: &[f64],
) -> Result<Option<Descent>> {
    let mut x = init.to_vec();
    let mut adam = Adam::new(x.len());
    let mut run = Descent {
        best_x: x.clone(),
        best: f64::INFINITY,
        trace: Vec::with_capacity(cfg.iterations),
    };
    for it in 0..cfg.iterations {
        let (objective, grad) = attack_objective_grad(problem, &x, label, cfg)?;
        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok(None);
        }
        if objective < run.best {
            run.best = objective;
            run.best_x.copy_from_slice(&x);
        }
        run.trace.push(run.best);
        if it + 1 == cfg.iterations {
            break;
        }
        adam.step(&mut x, &grad, cfg.schedule.rate(cfg.step_size, it, cfg.iterations));
        if cfg.clamp {
            x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    // The final iterate is scored on the last pass; iterations == 1 returns the
    // initialization.
    Ok(Some(run))
}

/// Reconstructs the input behind `problem.observed`, enumerating labels and
/// keeping the one with the lowest objective. Starts from seeded uniform
/// noise; a non-finite objective restarts from a fresh seed (at most 3 times).
pub fn invert_gradient(problem: &AttackProblem<'_>, cfg: &AttackConfig, truth: Option<&[f64]>) -> Result<ReconResult> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("iterations", "must be >= 1"));
    }
    let dim = problem.spec.input_dim();
    for restart in 0..=3usize {
        let mut init_rng = rng::stream(cfg.seed, Purpose::AttackInit, restart as u64, 0);
        let init: Vec<f64> = (0..dim).map(|_| init_rng.random::<f64>()).collect();
        let mut best: Option<(usize, Descent)> = None;
        let mut failed = false;
        for label in 0..problem.spec.n_classes() {
            match descend_label(problem, label, cfg, &init)? {
                None => {
                    failed = true;
                    break;
                }
                Some(run) => {
                    if best.as_ref().is_none_or(|(_, b)| run.best < b.best) {
                        best = Some((label, run));
                    }
                }
            }
        }
        if failed {
            log::warn!("attack objective became non-finite, restarting ({})", restart + 1);
            continue;
        }
        let (label, run) = best.expect("at least two labels");
        let psnr_db = truth.map(|t| psnr(&run.best_x, t, 1.0)).transpose()?;
        return Ok(ReconResult {
            input: run.best_x,
            label,
            objective: run.best,
            best_trace: run.trace,
            restarts: restart,
            psnr_db,
        });
    }
    Err(Error::Numeric("attack diverged after 3 restarts".into()))
}

/// Greyscale images as a binary PGM grid with a one-pixel black gutter.
pub fn write_pgm_grid(
    path: impl AsRef<std::path::Path>,
    images: &[Vec<f64>],
    height: usize,
    width: usize,
    columns: usize,
) -> Result<()> {
    use std::io::Write;
    if images.is_empty() {
        return Err(Error::invalid("images", "nothing to write"));
    }
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let gw = columns * (width + 1) + 1;
    let gh = rows * (height + 1) + 1;
    let mut pixels = vec![0u8; gw * gh];
    for (k, img) in images.iter().enumerate() {
        if img.len() != height * width {
            return Err(Error::dim("pgm image", height * width, img.len()));
        }
        let (r0, c0) = ((k / columns) * (height + 1) + 1, (k % columns) * (width + 1) + 1);
        for i in 0..height {
            for j in 0..width {
                let v = img[i * width + j].clamp(0.0, 1.0);
                pixels[(r0 + i) * gw + c0 + j] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    write!(file, "P5\n{gw} {gh}\n255\n")?;
    file.write_all(&pixels)?;
    Ok(())
}
