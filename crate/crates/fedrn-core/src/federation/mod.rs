//! The round-based simulation loop: participant sampling, warm-up rounds,
//! method-specific local updates, and data-size-weighted aggregation.
//!
//! A round runs in three phases so the server-side steps can be exercised
//! (and audited) in isolation: [`Simulation::prepare_round`] is server-side
//! planning, [`Simulation::run_local_updates`] is client work,
//! [`Simulation::apply_aggregation`] is the server-side merge. The server
//! phases only ever read models, accuracies, probe outputs, and data sizes;
//! never raw examples.

mod methods;

pub use methods::{build_method, method_names, Method, MethodSpec, UpdateContext, METHOD_REGISTRY};

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{
    dirichlet_partition, inject_noise, linear_noise_schedule, shard_partition, Dataset,
    LabeledExample, NoiseKind, NoiseSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{label_precision, label_recall, test_accuracy, RoundMetrics};
use crate::model::{average_params, init_mlp, ModelParams, Prediction, TrainConfig};
use crate::reliability::{ClientId, ProbeInput, ReliabilityTable};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionSpec {
    Shard { shards_per_client: usize },
    Dirichlet { beta: f64 },
}

/// How per-client noise is laid out; rates rise linearly from `lo` to `hi`
/// with the client index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoisePlan {
    Clean,
    Symmetric { lo: f64, hi: f64 },
    Asymmetric { lo: f64, hi: f64 },
    Mixed { lo: f64, hi: f64 },
}

impl NoisePlan {
    pub fn rates(&self, num_clients: usize) -> Result<Vec<f64>> {
        match *self {
            NoisePlan::Clean => Ok(vec![0.0; num_clients]),
            NoisePlan::Symmetric { lo, hi }
            | NoisePlan::Asymmetric { lo, hi }
            | NoisePlan::Mixed { lo, hi } => linear_noise_schedule(num_clients, lo, hi),
        }
    }

    fn build_spec(&self, num_clients: usize, num_classes: usize) -> Result<NoiseSpec> {
        let rates = self.rates(num_clients)?;
        Ok(match self {
            NoisePlan::Clean => NoiseSpec::clean(num_clients, num_classes),
            NoisePlan::Symmetric { .. } => NoiseSpec::uniform(NoiseKind::Symmetric, &rates, num_classes),
            NoisePlan::Asymmetric { .. } => NoiseSpec::uniform(NoiseKind::Asymmetric, &rates, num_classes),
            NoisePlan::Mixed { .. } => NoiseSpec::mixed(&rates, num_classes),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborMode {
    /// Top-k by reliability score.
    Reliable,
    /// Uniformly random k neighbors; the reference point for how much the
    /// reliability ranking itself contributes.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub num_clients: usize,
    pub participation_rate: f64,
    pub rounds: usize,
    /// Plain FedAvg rounds before robust selection activates; defaults to
    /// 20% of the total rounds.
    pub warmup_rounds: Option<usize>,
    pub k: usize,
    pub alpha: f64,
    pub train: TrainConfig,
    pub method: String,
    pub partition: PartitionSpec,
    pub noise: NoisePlan,
    pub master_seed: u64,
    pub neighbor_mode: NeighborMode,
    /// Fraction kept by the small-loss baseline.
    pub keep_fraction: f64,
    pub hidden_widths: Vec<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            num_clients: 100,
            participation_rate: 0.1,
            rounds: 60,
            warmup_rounds: None,
            k: 2,
            alpha: 0.6,
            train: TrainConfig {
                learning_rate: 0.01,
                momentum: 0.5,
                local_epochs: 5,
                batch_size: 32,
                rng_stream: RngStream::new(0),
            },
            method: "fedrn".to_string(),
            partition: PartitionSpec::Shard { shards_per_client: 2 },
            noise: NoisePlan::Symmetric { lo: 0.0, hi: 0.4 },
            master_seed: 0,
            neighbor_mode: NeighborMode::Reliable,
            keep_fraction: 0.6,
            hidden_widths: vec![32, 32],
        }
    }
}

impl SimulationConfig {
    /// Participants per round, `ceil(rate * num_clients)`.
    pub fn participants_per_round(&self) -> usize {
        (self.participation_rate * self.num_clients as f64).ceil() as usize
    }

    pub fn warmup_len(&self) -> usize {
        self.warmup_rounds.unwrap_or(self.rounds / 5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be >= 1"));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config(format!(
                "participation_rate must be in (0, 1], got {}",
                self.participation_rate
            )));
        }
        let m = self.participants_per_round();
        if m <= self.k {
            return Err(Error::config(format!(
                "participants per round ({m}) must exceed k ({})",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        match self.partition {
            PartitionSpec::Shard { shards_per_client } if shards_per_client == 0 => {
                return Err(Error::config("shards_per_client must be >= 1"));
            }
            PartitionSpec::Dirichlet { beta } if !(beta.is_finite() && beta > 0.0) => {
                return Err(Error::config(format!("beta must be positive, got {beta}")));
            }
            _ => {}
        }
        self.noise.rates(self.num_clients)?;
        self.train.validate()
    }
}

/// A neighbor handed to a client: the server's stored model copy plus its
/// reliability from the target's point of view.
#[derive(Clone, Debug)]
pub struct NeighborModel {
    pub client: ClientId,
    pub reliability: f64,
    pub params: ModelParams,
}

/// Server-side plan for one round.
#[derive(Clone, Debug)]
pub struct RoundPlan {
    pub round: usize,
    pub in_warmup: bool,
    pub participants: Vec<ClientId>,
    pub neighbors: BTreeMap<ClientId, Vec<NeighborModel>>,
    pub self_reliability: BTreeMap<ClientId, f64>,
    pub table: Option<ReliabilityTable>,
}

/// What a client sends back after its local update.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: ClientId,
    pub params: ModelParams,
    /// Size of the full local dataset; aggregation weights use this
    /// regardless of how many examples were actually trained on.
    pub data_size: usize,
    pub train_accuracy: f64,
    pub probe_output: Prediction,
    /// Indices the client trained on this round.
    pub selected: Vec<usize>,
    /// False when the selection came back empty and the client returned the
    /// received global model unchanged.
    pub trained: bool,
    pub degenerate_gmms: usize,
}

/// Server-side state carried between rounds. Only summaries of clients are
/// stored: their last model, training accuracy, and probe output.
#[derive(Clone, Debug)]
pub struct GlobalState {
    pub global: ModelParams,
    pub round: usize,
    pub accuracies: BTreeMap<ClientId, f64>,
    pub probes: BTreeMap<ClientId, Prediction>,
    pub models: BTreeMap<ClientId, ModelParams>,
}

/// Data-size-weighted parameter average.
pub fn aggregate(models: &[ModelParams], data_sizes: &[usize]) -> Result<ModelParams> {
    if models.is_empty() || models.len() != data_sizes.len() {
        return Err(Error::contract("aggregate needs one data size per model"));
    }
    if data_sizes.iter().any(|&s| s == 0) {
        return Err(Error::contract("data sizes must be positive"));
    }
    let total: f64 = data_sizes.iter().map(|&s| s as f64).sum();
    let weights: Vec<f64> = data_sizes.iter().map(|&s| s as f64 / total).collect();
    average_params(models, &weights)
}

pub struct Simulation {
    cfg: SimulationConfig,
    method: Box<dyn Method>,
    clients: Vec<Vec<LabeledExample>>,
    noise_rates: Vec<f64>,
    test: Dataset,
    probe: ProbeInput,
    state: GlobalState,
}

impl Simulation {
    pub fn new(cfg: SimulationConfig, train: Dataset, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        let method = build_method(&cfg.method, &cfg)?;
        if method.needs_neighbors() && cfg.k > 0 && cfg.warmup_len() == 0 && cfg.rounds > 0 {
            return Err(Error::config(
                "neighbor retrieval needs server-side state; set warmup_rounds >= 1",
            ));
        }
        if train.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }

        let root = RngStream::new(cfg.master_seed);
        let partition = match cfg.partition {
            PartitionSpec::Shard { shards_per_client } => {
                shard_partition(&train, cfg.num_clients, shards_per_client, root.labeled("partition"))?
            }
            PartitionSpec::Dirichlet { beta } => {
                dirichlet_partition(&train, cfg.num_clients, beta, root.labeled("partition"))?
            }
        };
        let spec = cfg.noise.build_spec(cfg.num_clients, train.num_classes)?;
        let noisy = inject_noise(&train, &partition, &spec, root.labeled("noise"))?;

        let clients: Vec<Vec<LabeledExample>> = (0..cfg.num_clients)
            .map(|c| partition.client(c).iter().map(|&i| noisy.examples[i].clone()).collect())
            .collect();
        let noise_rates = spec.clients.iter().map(|n| n.rate).collect();
        let probe = ProbeInput::generate(train.feature_dim, root.labeled("probe"));
        let global = init_mlp(train.feature_dim, &cfg.hidden_widths, train.num_classes, root.labeled("init"));

        Ok(Simulation {
            cfg,
            method,
            clients,
            noise_rates,
            test,
            probe,
            state: GlobalState {
                global,
                round: 0,
                accuracies: BTreeMap::new(),
                probes: BTreeMap::new(),
                models: BTreeMap::new(),
            },
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn client_data(&self, client: ClientId) -> &[LabeledExample] {
        &self.clients[client]
    }

    pub fn noise_rates(&self) -> &[f64] {
        &self.noise_rates
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// Uniform sample without replacement, determined by (seed, round).
    pub fn sample_participants(&self, round: usize) -> Vec<ClientId> {
        let m = self.cfg.participants_per_round();
        let mut rng = RngStream::new(self.cfg.master_seed)
            .labeled("participants")
            .child(round as u64)
            .rng();
        let mut ids = rand::seq::index::sample(&mut rng, self.cfg.num_clients, m).into_vec();
        ids.sort_unstable();
        ids
    }

    fn reliability_table(&self) -> Result<ReliabilityTable> {
        let clients: Vec<ClientId> = self.state.accuracies.keys().copied().collect();
        let accuracies: Vec<f64> = clients.iter().map(|c| self.state.accuracies[c]).collect();
        let probes: Vec<Prediction> = clients.iter().map(|c| self.state.probes[c].clone()).collect();
        ReliabilityTable::build(clients, accuracies, &probes, self.cfg.alpha)
    }

    /// Server-side planning: sample participants and, once warm-up is over,
    /// score reliability and pick each participant's neighbors.
    pub fn prepare_round(&self) -> Result<RoundPlan> {
        let round = self.state.round;
        let in_warmup = round < self.cfg.warmup_len();
        let participants = self.sample_participants(round);

        let mut neighbors: BTreeMap<ClientId, Vec<NeighborModel>> = BTreeMap::new();
        let mut self_reliability: BTreeMap<ClientId, f64> = BTreeMap::new();
        let mut table = None;

        if !in_warmup && self.method.needs_neighbors() && self.cfg.k > 0 {
            let t = self.reliability_table()?;
            for &c in &participants {
                let ids = match self.cfg.neighbor_mode {
                    NeighborMode::Reliable => t.top_k(c, self.cfg.k)?,
                    NeighborMode::Random => self.random_neighbors(&t, c, round)?,
                };
                let models = ids
                    .iter()
                    .map(|&n| NeighborModel {
                        client: n,
                        reliability: t.score(c, n).expect("neighbor comes from the table"),
                        params: self.state.models[&n].clone(),
                    })
                    .collect();
                neighbors.insert(c, models);
                self_reliability.insert(c, t.self_score(c));
            }
            table = Some(t);
        }

        Ok(RoundPlan { round, in_warmup, participants, neighbors, self_reliability, table })
    }

    fn random_neighbors(&self, table: &ReliabilityTable, target: ClientId, round: usize) -> Result<Vec<ClientId>> {
        let pool: Vec<ClientId> = table.clients.iter().copied().filter(|&n| n != target).collect();
        if pool.len() < self.cfg.k {
            return Err(Error::config(format!(
                "only {} candidate neighbors for client {target}, need {}",
                pool.len(),
                self.cfg.k
            )));
        }
        let mut rng = RngStream::new(self.cfg.master_seed)
            .labeled("random-neighbors")
            .child(round as u64)
            .child(target as u64)
            .rng();
        Ok(rand::seq::index::sample(&mut rng, pool.len(), self.cfg.k)
            .into_iter()
            .map(|i| pool[i])
            .collect())
    }

    /// Client-side phase; participants update in parallel. Results are
    /// independent of the execution order because every client draws from
    /// its own (seed, round, client) stream.
    pub fn run_local_updates(&self, plan: &RoundPlan) -> Result<Vec<ClientUpdate>> {
        plan.participants
            .par_iter()
            .map(|&c| {
                let stream = RngStream::new(self.cfg.master_seed)
                    .labeled("local-update")
                    .child(plan.round as u64)
                    .child(c as u64);
                let ctx = UpdateContext {
                    client: c,
                    round: plan.round,
                    in_warmup: plan.in_warmup,
                    global: &self.state.global,
                    examples: &self.clients[c],
                    neighbors: plan.neighbors.get(&c).map(Vec::as_slice).unwrap_or(&[]),
                    self_reliability: plan.self_reliability.get(&c).copied().unwrap_or(1.0),
                    train: self.cfg.train.with_stream(stream),
                    probe: &self.probe,
                    keep_fraction: self.cfg.keep_fraction,
                };
                self.method.local_update(&ctx)
            })
            .collect()
    }

    /// Server-side merge: weight by full local data sizes, then store each
    /// participant's summaries for future reliability scoring.
    pub fn apply_aggregation(&mut self, _plan: &RoundPlan, updates: &[ClientUpdate]) -> Result<()> {
        if updates.is_empty() {
            return Err(Error::contract("cannot aggregate an empty round"));
        }
        let models: Vec<ModelParams> = updates.iter().map(|u| u.params.clone()).collect();
        let sizes: Vec<usize> = updates.iter().map(|u| u.data_size).collect();
        self.state.global = aggregate(&models, &sizes)?;
        for u in updates {
            self.state.accuracies.insert(u.client, u.train_accuracy);
            self.state.probes.insert(u.client, u.probe_output.clone());
            self.state.models.insert(u.client, u.params.clone());
        }
        self.state.round += 1;
        Ok(())
    }

    /// Experimenter-side bookkeeping; this is the only phase that reads
    /// ground-truth labels.
    pub fn evaluate_round(&self, plan: &RoundPlan, updates: &[ClientUpdate]) -> Result<RoundMetrics> {
        let mut per_client = Vec::with_capacity(updates.len());
        let mut lps = Vec::new();
        let mut lrs = Vec::new();
        let mut sizes = Vec::with_capacity(updates.len());
        let mut empty = 0;
        let mut degenerate = 0;
        for u in updates {
            per_client.push(test_accuracy(&u.params, &self.test)?);
            let data = &self.clients[u.client];
            if let Some(lp) = label_precision(&u.selected, data) {
                lps.push(lp);
            }
            if let Some(lr) = label_recall(&u.selected, data) {
                lrs.push(lr);
            }
            sizes.push(u.selected.len());
            if u.selected.is_empty() {
                empty += 1;
            }
            degenerate += u.degenerate_gmms;
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        Ok(RoundMetrics {
            round: plan.round,
            test_accuracy: test_accuracy(&self.state.global, &self.test)?,
            per_client_accuracy: per_client,
            label_precision: mean(&lps),
            label_recall: mean(&lrs),
            clean_set_sizes: sizes,
            empty_clean_count: empty,
            degenerate_gmm_count: degenerate,
        })
    }

    pub fn step_round(&mut self) -> Result<RoundMetrics> {
        let plan = self.prepare_round()?;
        let updates = self.run_local_updates(&plan)?;
        self.apply_aggregation(&plan, &updates)?;
        self.evaluate_round(&plan, &updates)
    }

    /// Run all configured rounds and collect the per-round record.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.rounds);
        while self.state.round < self.cfg.rounds {
            out.push(self.step_round()?);
        }
        Ok(out)
    }

    /// Dump the current global model in the flat text format.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.state.global.to_text())?;
        Ok(())
    }
}

/// Convenience wrapper: build a simulation and run every round.
pub fn run_simulation(cfg: SimulationConfig, train: Dataset, test: Dataset) -> Result<Vec<RoundMetrics>> {
    Simulation::new(cfg, train, test)?.run()
}
