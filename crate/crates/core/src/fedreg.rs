//! Pseudo-data regularized local training.
//!
//! Each round a client derives two auxiliary sets from the received global
//! parameters `anchor`:
//!
//! * pseudo data: local inputs pushed away from the local data by `E` signed
//!   input-gradient ascent steps of size `eta_s`, labeled with the global
//!   model's soft predictions;
//! * perturbed data: the same iteration with the much smaller step `eta_p`,
//!   keeping the original labels.
//!
//! Every local step descends on the local loss evaluated at the slowly
//! updated parameters `gamma * theta + (1 - gamma) * anchor`, then projects
//! the result so that first-order estimates of the pseudo and perturbed
//! losses (gradients taken at the midpoint of `theta` and `anchor`) do not
//! increase relative to `anchor`.

use ndarray::{Array2, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fl::{epoch_batches, LocalTrainConfig};
use crate::model::{self, Batch, ModelSpec, ParamVector};
use crate::privacy;

/// Denominator guard for projection weights and the modified gradient.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedRegConfig {
    pub gamma: f64,
    pub eta_s: f64,
    pub eta_p: f64,
    pub fgsm_steps: usize,
    pub use_mg: bool,
    /// Clamp generated inputs back into `[0, 1]` after every signed step.
    pub clip_inputs: bool,
}

impl FedRegConfig {
    /// Defaults `eta_p = 0.01 * eta_s` and ten signed steps.
    pub fn new(gamma: f64, eta_s: f64) -> Self {
        FedRegConfig {
            gamma,
            eta_s,
            eta_p: 0.01 * eta_s,
            fgsm_steps: 10,
            use_mg: false,
            clip_inputs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", format!("{} not in [0, 1]", self.gamma)));
        }
        if !(self.eta_s > 0.0) || !self.eta_s.is_finite() {
            return Err(Error::invalid("eta_s", "must be positive"));
        }
        if !(self.eta_p > 0.0) || self.eta_p > self.eta_s {
            return Err(Error::invalid("eta_p", "must satisfy 0 < eta_p <= eta_s"));
        }
        if self.fgsm_steps == 0 {
            return Err(Error::invalid("fgsm_steps", "must be >= 1"));
        }
        Ok(())
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

/// `steps` iterations of `x += eta * sign(grad_x L(params; x, y))` with the
/// targets of `source` held fixed.
pub fn signed_ascent(
    spec: &ModelSpec,
    params: &ParamVector,
    source: &Batch,
    eta: f64,
    steps: usize,
    clip_inputs: bool,
) -> Result<Array2<f64>> {
    let mut work = source.clone();
    if eta == 0.0 {
        return Ok(work.inputs);
    }
    for _ in 0..steps {
        let grad = model::grad_inputs(spec, params, &work)?;
        Zip::from(&mut work.inputs).and(&grad).for_each(|x, &g| {
            *x += eta * sign(g);
            if clip_inputs {
                *x = x.clamp(0.0, 1.0);
            }
        });
    }
    Ok(work.inputs)
}

/// Pseudo data: signed ascent with `eta_s`, relabeled by the model's own
/// predictions at `anchor`.
pub fn gen_pseudo(
    spec: &ModelSpec,
    anchor: &ParamVector,
    shard: &Batch,
    eta_s: f64,
    steps: usize,
    clip_inputs: bool,
) -> Result<Batch> {
    let inputs = signed_ascent(spec, anchor, shard, eta_s, steps, clip_inputs)?;
    let targets = model::forward(spec, anchor, inputs.view())?;
    Ok(Batch { inputs, targets })
}

/// Perturbed data: signed ascent with `eta_p`, original labels kept.
pub fn gen_perturbed(
    spec: &ModelSpec,
    anchor: &ParamVector,
    shard: &Batch,
    eta_p: f64,
    steps: usize,
    clip_inputs: bool,
) -> Result<Batch> {
    let inputs = signed_ascent(spec, anchor, shard, eta_p, steps, clip_inputs)?;
    Ok(Batch {
        inputs,
        targets: shard.targets.clone(),
    })
}

/// Gradient of the mean loss on `batch` at `alpha * local + (1 - alpha) * anchor`.
pub fn grad_at_mix(
    spec: &ModelSpec,
    local: &ParamVector,
    anchor: &ParamVector,
    alpha: f64,
    batch: &Batch,
) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} not in [0, 1]")));
    }
    let at = ParamVector::mix(local, anchor, alpha)?;
    model::grad_params(spec, &at, batch)
}

/// Closed-form weights of the two sequential half-space projections.
///
/// `w_s` projects `local` onto `{theta : (anchor - theta) . g_s >= 0}`; `w_p`
/// then projects `local - w_s g_s` onto the half-space defined by `g_p`.
pub fn project_weights(
    local: &ParamVector,
    anchor: &ParamVector,
    g_s: &ParamVector,
    g_p: &ParamVector,
) -> Result<(f64, f64)> {
    if g_s.len() != local.len() || g_p.len() != local.len() {
        return Err(Error::dim("projection gradients", local.len(), g_s.len().min(g_p.len())));
    }
    let displacement = local.sub(anchor)?;
    let ss = g_s.dot(g_s)?;
    let w_s = if ss.sqrt() < DEGENERATE_NORM {
        0.0
    } else {
        (displacement.dot(g_s)? / ss).max(0.0)
    };
    let pp = g_p.dot(g_p)?;
    let w_p = if pp.sqrt() < DEGENERATE_NORM {
        0.0
    } else {
        let shifted = displacement.axpy(-w_s, g_s)?;
        (shifted.dot(g_p)? / pp).max(0.0)
    };
    Ok((w_s, w_p))
}

/// Same inputs, every target row uniform over `n` classes.
pub fn build_uniform_label_set(pseudo: &Batch, n: usize) -> Result<Batch> {
    if n < 2 {
        return Err(Error::invalid("n_classes", "need at least two classes"));
    }
    Ok(Batch {
        inputs: pseudo.inputs.clone(),
        targets: Array2::from_elem((pseudo.len(), n), 1.0 / n as f64),
    })
}

/// Component of `g` orthogonal to `g_prime`. Returns `g` unchanged when
/// `g_prime` is degenerate.
pub fn modified_gradient(g: &ParamVector, g_prime: &ParamVector) -> Result<ParamVector> {
    let pp = g_prime.dot(g_prime)?;
    if pp.sqrt() <= DEGENERATE_NORM {
        g.dot(g_prime)?;
        return Ok(g.clone());
    }
    let v = g.dot(g_prime)? / pp;
    let mut out = g.axpy(-v, g_prime)?;
    // Second Gram-Schmidt pass removes the rounding residue of the first.
    let residue = out.dot(g_prime)? / pp;
    out.add_scaled(-residue, g_prime)?;
    Ok(out)
}

/// Everything a FedReg client produces besides its parameters.
#[derive(Debug, Clone)]
pub struct FedRegArtifacts {
    pub pseudo: Batch,
    pub perturbed: Batch,
    /// `(w_s, w_p)` of every local step, in order.
    pub weights: Vec<(f64, f64)>,
}

/// FedReg local training from `anchor` on `shard`.
///
/// Pseudo and perturbed sets are generated once, before the first step, and
/// their minibatches are index-aligned with the local minibatch of each step.
pub fn local_train_fedreg<R: Rng>(
    spec: &ModelSpec,
    anchor: &ParamVector,
    shard: &Batch,
    cfg: &LocalTrainConfig,
    reg: &FedRegConfig,
    shuffle_rng: &mut R,
    noise_rng: &mut R,
) -> Result<(ParamVector, FedRegArtifacts)> {
    if shard.is_empty() {
        return Err(Error::invalid("shard", "client has no data"));
    }
    reg.validate()?;
    let pseudo = gen_pseudo(spec, anchor, shard, reg.eta_s, reg.fgsm_steps, reg.clip_inputs)?;
    let perturbed = gen_perturbed(spec, anchor, shard, reg.eta_p, reg.fgsm_steps, reg.clip_inputs)?;
    let uniform = if reg.use_mg {
        Some(build_uniform_label_set(&pseudo, spec.n_classes())?)
    } else {
        None
    };

    let mut theta = anchor.clone();
    let mut weights = Vec::new();
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(shard.len(), cfg.batch_size, shuffle_rng) {
            let local = shard.select(&idx);
            let mut g = grad_at_mix(spec, &theta, anchor, reg.gamma, &local)?;
            if let Some(uniform) = &uniform {
                let g_prime = grad_at_mix(spec, &theta, anchor, reg.gamma, &uniform.select(&idx))?;
                g = modified_gradient(&g, &g_prime)?;
            }
            if let Some(dp) = &cfg.dp {
                g = privacy::clip_and_noise(&g, dp, noise_rng)?;
            }
            theta.add_scaled(-cfg.learning_rate, &g)?;

            let g_s = grad_at_mix(spec, &theta, anchor, 0.5, &pseudo.select(&idx))?;
            let g_p = grad_at_mix(spec, &theta, anchor, 0.5, &perturbed.select(&idx))?;
            let (w_s, w_p) = project_weights(&theta, anchor, &g_s, &g_p)?;
            theta.add_scaled(-w_s, &g_s)?;
            theta.add_scaled(-w_p, &g_p)?;
            weights.push((w_s, w_p));
            if !theta.is_finite() {
                return Err(Error::Numeric("local parameters diverged".into()));
            }
        }
    }
    Ok((
        theta,
        FedRegArtifacts {
            pseudo,
            perturbed,
            weights,
        },
    ))
}
