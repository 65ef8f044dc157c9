//! Forgetting losses, empirical Fisher information and rounds-to-accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, ParamVector};

/// Coordinates where both Fisher vectors fall below this are ignored by the
/// correlation.
pub const FISHER_FLOOR: f64 = 1e-15;

/// Mean loss of the previous global parameters on one client's shard.
pub fn loss_prev(spec: &ModelSpec, theta_prev: &ParamVector, shard: &Batch) -> Result<f64> {
    if shard.is_empty() {
        return Err(Error::invalid("shard", "must be non-empty"));
    }
    model::batch_loss(spec, theta_prev, shard)
}

/// For each example the loss averaged over every sampled client's locally
/// trained parameters, then averaged over the shard.
pub fn loss_curr(spec: &ModelSpec, updates: &[ParamVector], shard: &Batch) -> Result<f64> {
    if updates.is_empty() {
        return Err(Error::invalid("updates", "need at least one"));
    }
    if shard.is_empty() {
        return Err(Error::invalid("shard", "must be non-empty"));
    }
    let mut per_example = vec![0.0; shard.len()];
    for theta in updates {
        let losses = model::example_losses(spec, theta, shard)?;
        for (acc, l) in per_example.iter_mut().zip(losses.iter()) {
            *acc += l;
        }
    }
    let k = updates.len() as f64;
    Ok(per_example.iter().map(|v| v / k).sum::<f64>() / shard.len() as f64)
}

pub fn forgetting_increment(loss_curr: f64, loss_prev: f64) -> f64 {
    loss_curr - loss_prev
}

/// Diagonal empirical Fisher: the coordinate-wise mean of squared
/// per-example gradients of `y^T log p(x)`. Soft targets are used as given.
pub fn empirical_fisher(spec: &ModelSpec, theta: &ParamVector, data: &Batch) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "must be non-empty"));
    }
    let mut fisher = vec![0.0; spec.param_count()];
    for i in 0..data.len() {
        // grad of y^T log p is minus the single-example cross-entropy gradient;
        // the sign disappears when squared.
        let g = model::grad_params(spec, theta, &data.select(&[i]))?;
        for (f, v) in fisher.iter_mut().zip(g.as_slice()) {
            *f += v * v;
        }
    }
    let n = data.len() as f64;
    Ok(ParamVector::from_vec(fisher.into_iter().map(|v| v / n).collect()))
}

/// Pearson correlation of two Fisher diagonals. `None` when fewer than two
/// coordinates survive the floor or either side has zero variance.
pub fn fisher_correlation(a: &ParamVector, b: &ParamVector) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let pairs: Vec<(f64, f64)> = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .filter(|(x, y)| !(x.abs() < FISHER_FLOOR && y.abs() < FISHER_FLOOR))
        .map(|(x, y)| (*x, *y))
        .collect();
    pearson(&pairs)
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation restricted to each layer's parameter block (weights and bias).
pub fn fisher_correlation_by_layer(spec: &ModelSpec, a: &ParamVector, b: &ParamVector) -> Vec<Option<f64>> {
    spec.layers()
        .iter()
        .map(|layer| {
            let span = layer.span();
            if span.end > a.len() || span.end > b.len() {
                return None;
            }
            fisher_correlation(
                &ParamVector::from_vec(a.as_slice()[span.clone()].to_vec()),
                &ParamVector::from_vec(b.as_slice()[span].to_vec()),
            )
        })
        .collect()
}

/// First round (1-indexed) whose accuracy reaches `fraction * reference`.
pub fn rounds_to_fraction(accuracy: &[f64], reference: f64, fraction: f64) -> Option<usize> {
    let target = fraction * reference;
    accuracy.iter().position(|&a| a >= target).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: usize,
    pub loss_prev: f64,
    pub loss_curr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-indexed.
    pub round: usize,
    pub sampled: Vec<usize>,
    pub test_accuracy: f64,
    /// Previous round's clients, evaluated before and after this round.
    pub losses: Vec<ClientLoss>,
    pub mean_loss_prev: Option<f64>,
    pub mean_loss_curr: Option<f64>,
    pub mean_increment: Option<f64>,
    /// Same losses for the shadow trainer, when one is configured.
    pub shadow_losses: Vec<ClientLoss>,
    pub shadow_mean_increment: Option<f64>,
    /// Per-client whole-vector correlation, for clients that produced one.
    pub fisher_rho_clients: Vec<Option<f64>>,
    pub fisher_rho: Option<f64>,
    pub fisher_rho_layers: Vec<Option<f64>>,
    pub flagged: usize,
}

fn mean_of_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let kept: Vec<f64> = values.flatten().collect();
    (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
}

fn client_losses(per_client: Vec<(usize, f64, f64)>) -> Vec<ClientLoss> {
    per_client
        .into_iter()
        .map(|(client, loss_prev, loss_curr)| ClientLoss {
            client,
            loss_prev,
            loss_curr,
        })
        .collect()
}

/// Means of `loss_prev`, `loss_curr` and the increment.
fn loss_means(losses: &[ClientLoss]) -> Option<(f64, f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let n = losses.len() as f64;
    let prev = losses.iter().map(|l| l.loss_prev).sum::<f64>() / n;
    let curr = losses.iter().map(|l| l.loss_curr).sum::<f64>() / n;
    let inc = losses
        .iter()
        .map(|l| forgetting_increment(l.loss_curr, l.loss_prev))
        .sum::<f64>()
        / n;
    Some((prev, curr, inc))
}

impl RoundRecord {
    pub fn new(round: usize, sampled: Vec<usize>) -> Self {
        RoundRecord {
            round,
            sampled,
            test_accuracy: 0.0,
            losses: Vec::new(),
            mean_loss_prev: None,
            mean_loss_curr: None,
            mean_increment: None,
            shadow_losses: Vec::new(),
            shadow_mean_increment: None,
            fisher_rho_clients: Vec::new(),
            fisher_rho: None,
            fisher_rho_layers: Vec::new(),
            flagged: 0,
        }
    }

    /// `(client, loss_prev, loss_curr)` per evaluated client.
    pub fn set_forgetting(&mut self, per_client: Vec<(usize, f64, f64)>) {
        self.losses = client_losses(per_client);
        if let Some((prev, curr, inc)) = loss_means(&self.losses) {
            self.mean_loss_prev = Some(prev);
            self.mean_loss_curr = Some(curr);
            self.mean_increment = Some(inc);
        }
    }

    pub fn set_shadow_forgetting(&mut self, per_client: Vec<(usize, f64, f64)>) {
        self.shadow_losses = client_losses(per_client);
        self.shadow_mean_increment = loss_means(&self.shadow_losses).map(|m| m.2);
    }

    /// Per-client `(whole-vector rho, per-layer rho)`.
    pub fn set_fisher(&mut self, correlations: &[(Option<f64>, Vec<Option<f64>>)]) {
        self.fisher_rho_clients = correlations.iter().map(|c| c.0).collect();
        self.fisher_rho = mean_of_some(self.fisher_rho_clients.iter().copied());
        let layers = correlations.iter().map(|c| c.1.len()).max().unwrap_or(0);
        self.fisher_rho_layers = (0..layers)
            .map(|l| mean_of_some(correlations.iter().map(|c| c.1.get(l).copied().flatten())))
            .collect();
    }
}
