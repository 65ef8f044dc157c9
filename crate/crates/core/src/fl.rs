//! Federated round loop: client sampling, local training for every supported
//! algorithm, and server-side averaging.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ClientPartition, Dataset};
use crate::diagnostics::{self, RoundRecord};
use crate::error::{Error, Result};
use crate::fedreg::{self, FedRegConfig};
use crate::model::{self, Batch, ModelSpec, ParamVector};
use crate::privacy::{self, DpConfig};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub enum Algorithm {
    /// One full-batch gradient step per round.
    Sgd,
    FedAvg,
    FedProx { mu: f64 },
    FedCurv { lambda: f64 },
    Scaffold,
    FedReg(FedRegConfig),
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx { .. } => "fedprox",
            Algorithm::FedCurv { .. } => "fedcurv",
            Algorithm::Scaffold => "scaffold",
            Algorithm::FedReg(_) => "fedreg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
    /// Clip and noise every step gradient.
    pub dp: Option<DpConfig>,
}

impl LocalTrainConfig {
    pub fn new(algorithm: Algorithm, epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        LocalTrainConfig {
            epochs,
            batch_size,
            learning_rate,
            algorithm,
            dp: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        match &self.algorithm {
            Algorithm::FedProx { mu } if !(*mu >= 0.0) => {
                return Err(Error::invalid("mu", "must be >= 0"))
            }
            Algorithm::FedCurv { lambda } if !(*lambda >= 0.0) => {
                return Err(Error::invalid("lambda", "must be >= 0"))
            }
            Algorithm::FedReg(reg) => reg.validate()?,
            _ => {}
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }

    /// SGD runs as FedAvg with a single full-shard step.
    fn resolved(&self) -> LocalTrainConfig {
        match self.algorithm {
            Algorithm::Sgd => LocalTrainConfig {
                epochs: 1,
                batch_size: usize::MAX,
                algorithm: Algorithm::FedAvg,
                ..self.clone()
            },
            _ => self.clone(),
        }
    }
}

/// Minibatch index lists for one epoch. A batch covering the whole shard
/// keeps the natural order; otherwise the shard is reshuffled.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    if batch_size >= n {
        return vec![(0..n).collect()];
    }
    let order = index::sample(rng, n, n).into_vec();
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Uniform sample of `k` distinct clients out of `n_clients`, sorted.
pub fn sample_clients<R: Rng + ?Sized>(n_clients: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > n_clients {
        return Err(Error::invalid(
            "clients_per_round",
            format!("{k} exceeds the {n_clients} available clients"),
        ));
    }
    let mut picked = index::sample(rng, n_clients, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Diagonal Fisher terms a FedCurv client shares with the server.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherTerms {
    pub fisher: ParamVector,
    /// `fisher ⊙ theta`.
    pub weighted: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateExtras {
    None,
    ControlDelta(ParamVector),
    Fisher(FisherTerms),
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub n_examples: usize,
    pub extras: UpdateExtras,
    /// Local training diverged; the update is excluded from aggregation.
    pub flagged: bool,
}

impl ClientUpdate {
    pub fn new(client_id: usize, params: ParamVector) -> Self {
        ClientUpdate {
            client_id,
            params,
            n_examples: 0,
            extras: UpdateExtras::None,
            flagged: false,
        }
    }
}

/// Unweighted coordinate-wise mean, summed in client-id order.
pub fn aggregate_average(updates: &[ClientUpdate]) -> Result<ParamVector> {
    aggregate(updates, false)
}

/// Mean weighted by `n_examples`.
pub fn aggregate_weighted(updates: &[ClientUpdate]) -> Result<ParamVector> {
    aggregate(updates, true)
}

fn aggregate(updates: &[ClientUpdate], weighted: bool) -> Result<ParamVector> {
    let Some(first) = updates.first() else {
        return Err(Error::invalid("updates", "nothing to aggregate"));
    };
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let total: f64 = if weighted {
        ordered.iter().map(|u| u.n_examples as f64).sum()
    } else {
        ordered.len() as f64
    };
    if !(total > 0.0) {
        return Err(Error::invalid("updates", "zero total weight"));
    }
    let mut sum = ParamVector::zeros(first.params.len());
    for u in ordered {
        let w = if weighted { u.n_examples as f64 } else { 1.0 };
        sum.add_scaled(w, &u.params)?;
    }
    Ok(ParamVector::from_vec(
        sum.into_vec().into_iter().map(|v| v / total).collect(),
    ))
}

/// Minibatch gradient descent from `anchor`, with `correction` producing the
/// per-step gradient from the raw loss gradient.
fn descend(
    spec: &ModelSpec,
    anchor: &ParamVector,
    shard: &Batch,
    cfg: &LocalTrainConfig,
    shuffle_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
    mut correction: impl FnMut(&ParamVector, &mut ParamVector) -> Result<()>,
) -> Result<(ParamVector, usize)> {
    if shard.is_empty() {
        return Err(Error::invalid("shard", "client has no data"));
    }
    let mut theta = anchor.clone();
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(shard.len(), cfg.batch_size, shuffle_rng) {
            let mut g = model::grad_params(spec, &theta, &shard.select(&idx))?;
            correction(&theta, &mut g)?;
            if let Some(dp) = &cfg.dp {
                g = privacy::clip_and_noise(&g, dp, noise_rng)?;
            }
            theta.add_scaled(-cfg.learning_rate, &g)?;
            if !theta.is_finite() {
                return Err(Error::Numeric("local parameters diverged".into()));
            }
            steps += 1;
        }
    }
    Ok((theta, steps))
}

/// Per-client random streams for one round.
pub struct ClientStreams {
    pub shuffle: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl ClientStreams {
    pub fn new(master_seed: u64, round: usize, client: usize) -> Self {
        ClientStreams {
            shuffle: rng::stream(master_seed, Purpose::LocalShuffle, round as u64, client as u64),
            noise: rng::stream(master_seed, Purpose::DpNoise, round as u64, client as u64),
        }
    }
}

pub fn local_train_fedavg(
    spec: &ModelSpec,
    anchor: &ParamVector,
    shard: &Batch,
    cfg: &LocalTrainConfig,
    streams: &mut ClientStreams,
) -> Result<ParamVector> {
    let cfg = cfg.resolved();
    let (theta, _) = descend(spec, anchor, shard, &cfg, &mut streams.shuffle, &mut streams.noise, |_, _| Ok(()))?;
    Ok(theta)
}

/// FedAvg with the proximal gradient `mu (theta - anchor)` added to every step.
pub fn local_train_fedprox(
    spec: &ModelSpec,
    anchor: &ParamVector,
    shard: &Batch,
    cfg: &LocalTrainConfig,
    mu: f64,
    streams: &mut ClientStreams,
) -> Result<ParamVector> {
    if !(mu >= 0.0) {
        return Err(Error::invalid("mu", "must be >= 0"));
    }
    let (theta, _) = descend(spec, anchor, shard, cfg, &mut streams.shuffle, &mut streams.noise, |theta, g| {
        if mu != 0.0 {
            g.add_scaled(mu, &theta.sub(anchor)?)?;
        }
        Ok(())
    })?;
    Ok(theta)
}

/// Sums of the Fisher terms of all clients other than the one training.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherPenalty {
    /// `sum_j F_j`
    pub fisher_sum: ParamVector,
    /// `sum_j F_j ⊙ theta_j`
    pub weighted_sum: ParamVector,
}

impl FisherPenalty {
    /// `2 lambda (fisher_sum ⊙ theta - weighted_sum)`, i.e. the gradient of
    /// `lambda sum_j sum_k F_jk (theta_k - theta_jk)^2`.
    pub fn gradient(&self, theta: &ParamVector, lambda: f64) -> ParamVector {
        let values = theta
            .as_slice()
            .iter()
            .zip(self.fisher_sum.as_slice())
            .zip(self.weighted_sum.as_slice())
            .map(|((t, f), w)| 2.0 * lambda * (f * t - w))
            .collect();
        ParamVector::from_vec(values)
    }
}

pub fn local_train_fedcurv(
    spec: &ModelSpec,
    anchor: &ParamVector,
    shard: &Batch,
    cfg: &LocalTrainConfig,
    lambda: f64,
    penalty: Option<&FisherPenalty>,
    streams: &mut ClientStreams,
) -> Result<(ParamVector, FisherTerms)> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", "must be >= 0"));
    }
    let active = penalty.filter(|_| lambda != 0.0);
    let (theta, _) = descend(spec, anchor, shard, cfg, &mut streams.shuffle, &mut streams.noise, |theta, g| {
        if let Some(p) = active {
            g.add_scaled(1.0, &p.gradient(theta, lambda))?;
        }
        Ok(())
    })?;
    let fisher = diagnostics::empirical_fisher(spec, &theta, shard)?;
    let weighted = ParamVector::from_vec(
        fisher
            .as_slice()
            .iter()
            .zip(theta.as_slice())
            .map(|(f, t)| f * t)
            .collect(),
    );
    Ok((theta, FisherTerms { fisher, weighted }))
}

/// SCAFFOLD local training; returns the parameters and the control-variate
/// delta `c_i' - c_i` with `c_i' = c_i - c + (anchor - theta) / (steps * lr)`.
pub fn local_train_scaffold(
    spec: &ModelSpec,
    anchor: &ParamVector,
    shard: &Batch,
    cfg: &LocalTrainConfig,
    c_global: &ParamVector,
    c_local: &ParamVector,
    streams: &mut ClientStreams,
) -> Result<(ParamVector, ParamVector)> {
    let correction = c_global.sub(c_local)?;
    if correction.len() != anchor.len() {
        return Err(Error::dim("control variate", anchor.len(), correction.len()));
    }
    let active = correction.as_slice().iter().any(|&v| v != 0.0);
    let (theta, steps) = descend(spec, anchor, shard, cfg, &mut streams.shuffle, &mut streams.noise, |_, g| {
        if active {
            g.add_scaled(1.0, &correction)?;
        }
        Ok(())
    })?;
    let mut delta = anchor.sub(&theta)?;
    delta.scale(1.0 / (steps as f64 * cfg.learning_rate));
    delta.add_scaled(-1.0, c_global)?;
    Ok((theta, delta))
}

/// Server-side state carried between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub global: ParamVector,
    pub scaffold_global: ParamVector,
    pub scaffold_clients: BTreeMap<usize, ParamVector>,
    /// Latest Fisher terms per client (FedCurv).
    pub fisher_terms: BTreeMap<usize, (usize, FisherTerms)>,
}

impl ServerState {
    pub fn new(global: ParamVector) -> Self {
        let n = global.len();
        ServerState {
            round: 0,
            global,
            scaffold_global: ParamVector::zeros(n),
            scaffold_clients: BTreeMap::new(),
            fisher_terms: BTreeMap::new(),
        }
    }

    /// FedCurv penalty built from every stored client except `exclude`.
    pub fn fisher_penalty(&self, exclude: usize) -> Option<FisherPenalty> {
        let mut acc: Option<FisherPenalty> = None;
        for (&client, (round, terms)) in &self.fisher_terms {
            if client == exclude {
                continue;
            }
            let staleness = self.round.saturating_sub(*round);
            if staleness > 0 {
                log::trace!("fisher terms of client {client} are {staleness} rounds old");
            }
            match acc.as_mut() {
                None => {
                    acc = Some(FisherPenalty {
                        fisher_sum: terms.fisher.clone(),
                        weighted_sum: terms.weighted.clone(),
                    })
                }
                Some(p) => {
                    p.fisher_sum.add_scaled(1.0, &terms.fisher).ok()?;
                    p.weighted_sum.add_scaled(1.0, &terms.weighted).ok()?;
                }
            }
        }
        acc
    }
}

/// Everything a local training run produces.
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub update: ClientUpdate,
    /// FedReg only.
    pub artifacts: Option<fedreg::FedRegArtifacts>,
}

/// Dispatches one client's local training. Numeric divergence yields a
/// flagged update instead of an error.
pub fn train_client(
    spec: &ModelSpec,
    state: &ServerState,
    client_id: usize,
    shard: &Batch,
    cfg: &LocalTrainConfig,
    streams: &mut ClientStreams,
) -> Result<LocalResult> {
    let anchor = &state.global;
    let outcome: Result<(ParamVector, UpdateExtras, Option<fedreg::FedRegArtifacts>)> =
        match &cfg.algorithm {
            Algorithm::Sgd | Algorithm::FedAvg => local_train_fedavg(spec, anchor, shard, cfg, streams)
                .map(|p| (p, UpdateExtras::None, None)),
            Algorithm::FedProx { mu } => local_train_fedprox(spec, anchor, shard, cfg, *mu, streams)
                .map(|p| (p, UpdateExtras::None, None)),
            Algorithm::FedCurv { lambda } => {
                let penalty = state.fisher_penalty(client_id);
                local_train_fedcurv(spec, anchor, shard, cfg, *lambda, penalty.as_ref(), streams)
                    .map(|(p, terms)| (p, UpdateExtras::Fisher(terms), None))
            }
            Algorithm::Scaffold => {
                let zeros;
                let c_local = match state.scaffold_clients.get(&client_id) {
                    Some(c) => c,
                    None => {
                        zeros = ParamVector::zeros(anchor.len());
                        &zeros
                    }
                };
                local_train_scaffold(spec, anchor, shard, cfg, &state.scaffold_global, c_local, streams)
                    .map(|(p, delta)| (p, UpdateExtras::ControlDelta(delta), None))
            }
            Algorithm::FedReg(reg) => fedreg::local_train_fedreg(
                spec,
                anchor,
                shard,
                cfg,
                reg,
                &mut streams.shuffle,
                &mut streams.noise,
            )
            .map(|(p, art)| (p, UpdateExtras::None, Some(art))),
        };
    match outcome {
        Ok((params, extras, artifacts)) => Ok(LocalResult {
            update: ClientUpdate {
                client_id,
                params,
                n_examples: shard.len(),
                extras,
                flagged: false,
            },
            artifacts,
        }),
        Err(Error::Numeric(reason)) => {
            log::warn!("client {client_id} flagged: {reason}");
            Ok(LocalResult {
                update: ClientUpdate {
                    client_id,
                    params: anchor.clone(),
                    n_examples: shard.len(),
                    extras: UpdateExtras::None,
                    flagged: true,
                },
                artifacts: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// Which per-round diagnostics to compute.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsConfig {
    pub forgetting: bool,
    pub fisher: bool,
    /// Rounds of previously sampled clients forming the "previous data".
    pub fisher_window: usize,
    /// Second local trainer run each round from the same global parameters
    /// and on the same clients, used only to measure its forgetting next to
    /// the main algorithm's. It never feeds the aggregate.
    pub shadow: Option<LocalTrainConfig>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            forgetting: false,
            fisher: false,
            fisher_window: 10,
            shadow: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub seed: u64,
    pub local: LocalTrainConfig,
    /// Weight the average by shard size instead of `1/K`.
    pub weighted_average: bool,
    pub diagnostics: DiagnosticsConfig,
    /// Worker threads for client training; results are identical for any value.
    pub workers: usize,
}

/// The fixed environment of a run.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub spec: &'a ModelSpec,
    pub train: &'a Dataset,
    pub partition: &'a ClientPartition,
    pub test: &'a Dataset,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub state: ServerState,
}

/// Initial global parameters for a master seed.
pub fn initial_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    spec.init_params(&mut rng::stream(seed, Purpose::Init, 0, 0))
}

pub fn run_rounds(fed: Federation<'_>, cfg: &RunConfig, init: Option<ParamVector>) -> Result<RunOutcome> {
    run_rounds_with(fed, cfg, init, |_| Ok(()))
}

/// Runs `cfg.rounds` rounds, handing every finished record to `on_round`
/// before starting the next round.
pub fn run_rounds_with(
    fed: Federation<'_>,
    cfg: &RunConfig,
    init: Option<ParamVector>,
    mut on_round: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.local.validate()?;
    if let Some(shadow) = &cfg.diagnostics.shadow {
        shadow.validate()?;
    }
    if fed.train.dim() != fed.spec.input_dim() || fed.test.dim() != fed.spec.input_dim() {
        return Err(Error::dim("dataset dimension", fed.spec.input_dim(), fed.train.dim()));
    }
    if fed.train.n_classes != fed.spec.n_classes() {
        return Err(Error::dim("model classes", fed.train.n_classes, fed.spec.n_classes()));
    }
    fed.partition.validate(fed.train)?;
    let n_clients = fed.partition.n_clients();
    if cfg.clients_per_round == 0 || cfg.clients_per_round > n_clients {
        return Err(Error::invalid(
            "clients_per_round",
            format!("must be in 1..={n_clients}"),
        ));
    }
    let init = init.unwrap_or_else(|| initial_params(fed.spec, cfg.seed));
    if init.len() != fed.spec.param_count() {
        return Err(Error::dim("initial parameters", fed.spec.param_count(), init.len()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let shard_of = |client: usize| fed.train.batch(&fed.partition.assignments[client]);

    let mut state = ServerState::new(init);
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut previous: Vec<usize> = Vec::new();
    let mut history: VecDeque<Vec<usize>> = VecDeque::new();

    for round in 1..=cfg.rounds {
        state.round = round;
        let mut sampling = rng::stream(cfg.seed, Purpose::Sampling, round as u64, 0);
        let sampled = sample_clients(n_clients, cfg.clients_per_round, &mut sampling)?;

        let results: Vec<LocalResult> = pool.install(|| {
            sampled
                .par_iter()
                .map(|&client| {
                    let mut streams = ClientStreams::new(cfg.seed, round, client);
                    train_client(fed.spec, &state, client, &shard_of(client), &cfg.local, &mut streams)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut record = RoundRecord::new(round, sampled.clone());
        record.flagged = results.iter().filter(|r| r.update.flagged).count();

        if cfg.diagnostics.forgetting && !previous.is_empty() {
            let trained: Vec<ParamVector> = results
                .iter()
                .filter(|r| !r.update.flagged)
                .map(|r| r.update.params.clone())
                .collect();
            if !trained.is_empty() {
                let per_client: Vec<(usize, f64, f64)> = pool.install(|| {
                    previous
                        .par_iter()
                        .map(|&j| {
                            let shard = shard_of(j);
                            let prev = diagnostics::loss_prev(fed.spec, &state.global, &shard)?;
                            let curr = diagnostics::loss_curr(fed.spec, &trained, &shard)?;
                            Ok((j, prev, curr))
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                record.set_forgetting(per_client);
            }
            if let Some(shadow_cfg) = &cfg.diagnostics.shadow {
                let shadow_trained: Vec<ParamVector> = pool.install(|| {
                    sampled
                        .par_iter()
                        .map(|&client| {
                            let mut streams = ClientStreams::new(cfg.seed, round, client);
                            train_client(fed.spec, &state, client, &shard_of(client), shadow_cfg, &mut streams)
                        })
                        .collect::<Result<Vec<_>>>()
                })?
                .into_iter()
                .filter(|r| !r.update.flagged)
                .map(|r| r.update.params)
                .collect();
                if !shadow_trained.is_empty() {
                    let per_client: Vec<(usize, f64, f64)> = pool.install(|| {
                        previous
                            .par_iter()
                            .map(|&j| {
                                let shard = shard_of(j);
                                let prev = diagnostics::loss_prev(fed.spec, &state.global, &shard)?;
                                let curr = diagnostics::loss_curr(fed.spec, &shadow_trained, &shard)?;
                                Ok((j, prev, curr))
                            })
                            .collect::<Result<Vec<_>>>()
                    })?;
                    record.set_shadow_forgetting(per_client);
                }
            }
        }

        if cfg.diagnostics.fisher && !history.is_empty() {
            let window: BTreeSet<usize> = history.iter().flatten().copied().collect();
            let mut indices = Vec::new();
            for &j in &window {
                indices.extend_from_slice(&fed.partition.assignments[j]);
            }
            let previous_data = fed.train.batch(&indices);
            let correlations: Vec<(Option<f64>, Vec<Option<f64>>)> = pool.install(|| {
                results
                    .par_iter()
                    .filter(|r| !r.update.flagged)
                    .filter_map(|r| r.artifacts.as_ref().map(|a| (r, a)))
                    .map(|(r, art)| {
                        let at = &r.update.params;
                        let f_pseudo = diagnostics::empirical_fisher(fed.spec, at, &art.pseudo)?;
                        let f_prev = diagnostics::empirical_fisher(fed.spec, at, &previous_data)?;
                        Ok((
                            diagnostics::fisher_correlation(&f_pseudo, &f_prev),
                            diagnostics::fisher_correlation_by_layer(fed.spec, &f_pseudo, &f_prev),
                        ))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            record.set_fisher(&correlations);
        }

        let kept: Vec<ClientUpdate> = results
            .into_iter()
            .map(|r| r.update)
            .filter(|u| !u.flagged)
            .collect();
        if !kept.is_empty() {
            let next = if cfg.weighted_average {
                aggregate_weighted(&kept)?
            } else {
                aggregate_average(&kept)?
            };
            if !next.is_finite() {
                return Err(Error::Numeric(format!("round {round}: aggregate is not finite")));
            }
            apply_server_extras(&mut state, &kept, n_clients)?;
            state.global = next;
        }

        record.test_accuracy = model::accuracy(
            fed.spec,
            &state.global,
            fed.test.features.view(),
            &fed.test.labels,
        )?;
        on_round(&record)?;
        records.push(record);

        previous = sampled.clone();
        history.push_back(sampled);
        while history.len() > cfg.diagnostics.fisher_window.max(1) {
            history.pop_front();
        }
    }
    Ok(RunOutcome { records, state })
}

/// SCAFFOLD `c <- c + (|S| / N) mean(delta c)` and per-client variates;
/// FedCurv stores the latest Fisher terms of every reporting client.
fn apply_server_extras(state: &mut ServerState, kept: &[ClientUpdate], n_clients: usize) -> Result<()> {
    let deltas: Vec<&ClientUpdate> = kept
        .iter()
        .filter(|u| matches!(u.extras, UpdateExtras::ControlDelta(_)))
        .collect();
    if !deltas.is_empty() {
        let mut mean = ParamVector::zeros(state.global.len());
        for u in &deltas {
            if let UpdateExtras::ControlDelta(d) = &u.extras {
                mean.add_scaled(1.0, d)?;
                let entry = state
                    .scaffold_clients
                    .entry(u.client_id)
                    .or_insert_with(|| ParamVector::zeros(d.len()));
                entry.add_scaled(1.0, d)?;
            }
        }
        mean.scale(1.0 / deltas.len() as f64);
        let factor = deltas.len() as f64 / n_clients as f64;
        state.scaffold_global.add_scaled(factor, &mean)?;
    }
    for u in kept {
        if let UpdateExtras::Fisher(terms) = &u.extras {
            state.fisher_terms.insert(u.client_id, (state.round, terms.clone()));
        }
    }
    Ok(())
}
