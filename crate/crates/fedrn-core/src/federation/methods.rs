//! Local-update strategies behind a common trait, registered by name and
//! selected at runtime through the simulation config.

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{forward, per_example_losses, sgd_train, training_accuracy, ModelParams, TrainConfig};
use crate::reliability::{ClientId, ProbeInput};
use crate::selection::{fedrn_select, small_loss_select};

use super::{ClientUpdate, NeighborModel, SimulationConfig};

/// Everything a client sees when performing its local update.
pub struct UpdateContext<'a> {
    pub client: ClientId,
    pub round: usize,
    pub in_warmup: bool,
    pub global: &'a ModelParams,
    pub examples: &'a [LabeledExample],
    pub neighbors: &'a [NeighborModel],
    /// Reliability of the client's own model in the selection ensemble.
    pub self_reliability: f64,
    /// Training hyperparameters with this client's round-specific stream.
    pub train: TrainConfig,
    pub probe: &'a ProbeInput,
    pub keep_fraction: f64,
}

/// One local-update strategy. Implementations must be pure functions of the
/// context so rounds can run clients in parallel.
pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the server should score reliability and attach neighbor
    /// models after warm-up.
    fn needs_neighbors(&self) -> bool {
        false
    }

    fn local_update(&self, ctx: &UpdateContext<'_>) -> Result<ClientUpdate>;
}

/// Registry entry: a method name plus its constructor.
pub struct MethodSpec {
    pub name: &'static str,
    pub summary: &'static str,
    pub build: fn(&SimulationConfig) -> Box<dyn Method>,
}

pub const METHOD_REGISTRY: &[MethodSpec] = &[
    MethodSpec {
        name: "fedavg",
        summary: "plain federated averaging over all observed labels",
        build: |_| Box::new(FedAvg),
    },
    MethodSpec {
        name: "fedrn",
        summary: "clean-set selection ensembled over k reliable neighbors",
        build: |_| Box::new(FedRn),
    },
    MethodSpec {
        name: "small_loss",
        summary: "keep a fixed fraction of smallest-loss examples",
        build: |cfg| Box::new(SmallLoss { keep_fraction: cfg.keep_fraction }),
    },
    MethodSpec {
        name: "oracle",
        summary: "upper reference trained on truly clean examples only",
        build: |_| Box::new(OracleClean),
    },
];

pub fn method_names() -> Vec<&'static str> {
    METHOD_REGISTRY.iter().map(|m| m.name).collect()
}

pub fn build_method(tag: &str, cfg: &SimulationConfig) -> Result<Box<dyn Method>> {
    METHOD_REGISTRY
        .iter()
        .find(|m| m.name == tag)
        .map(|m| (m.build)(cfg))
        .ok_or_else(|| {
            Error::config(format!(
                "unknown method {tag:?}; available: {}",
                method_names().join(", ")
            ))
        })
}

/// Train a fresh copy of the global model on the given subset; an empty
/// subset skips training and returns the global model unchanged.
fn train_on_subset(ctx: &UpdateContext<'_>, indices: &[usize]) -> Result<(ModelParams, bool)> {
    if indices.is_empty() {
        return Ok((ctx.global.clone(), false));
    }
    let subset: Vec<LabeledExample> = indices.iter().map(|&i| ctx.examples[i].clone()).collect();
    Ok((sgd_train(ctx.global, &subset, &ctx.train)?, true))
}

/// Attach the summaries every update sends to the server: post-training
/// accuracy on the full local data and the softmax output for the shared
/// probe.
fn finish_update(
    ctx: &UpdateContext<'_>,
    params: ModelParams,
    selected: Vec<usize>,
    trained: bool,
    degenerate_gmms: usize,
) -> Result<ClientUpdate> {
    let train_accuracy = training_accuracy(&params, ctx.examples)?;
    let probe_output = forward(&params, ctx.probe.features())?;
    Ok(ClientUpdate {
        client: ctx.client,
        params,
        data_size: ctx.examples.len(),
        train_accuracy,
        probe_output,
        selected,
        trained,
        degenerate_gmms,
    })
}

fn full_data_update(ctx: &UpdateContext<'_>) -> Result<ClientUpdate> {
    let selected: Vec<usize> = (0..ctx.examples.len()).collect();
    let (params, trained) = train_on_subset(ctx, &selected)?;
    finish_update(ctx, params, selected, trained, 0)
}

struct FedAvg;

impl Method for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn local_update(&self, ctx: &UpdateContext<'_>) -> Result<ClientUpdate> {
        full_data_update(ctx)
    }
}

struct FedRn;

impl Method for FedRn {
    fn name(&self) -> &'static str {
        "fedrn"
    }

    fn needs_neighbors(&self) -> bool {
        true
    }

    fn local_update(&self, ctx: &UpdateContext<'_>) -> Result<ClientUpdate> {
        if ctx.in_warmup {
            return full_data_update(ctx);
        }
        let neighbor_params: Vec<ModelParams> =
            ctx.neighbors.iter().map(|n| n.params.clone()).collect();
        let mut reliabilities = Vec::with_capacity(ctx.neighbors.len() + 1);
        reliabilities.push(ctx.self_reliability);
        reliabilities.extend(ctx.neighbors.iter().map(|n| n.reliability));
        if reliabilities.iter().sum::<f64>() <= 0.0 {
            // Zero total reliability carries no ranking information; weight
            // the ensemble uniformly instead of failing the round.
            reliabilities.fill(1.0);
        }
        let report = fedrn_select(ctx.global, &neighbor_params, ctx.examples, &reliabilities, &ctx.train)?;
        let (params, trained) = train_on_subset(ctx, report.clean_set.indices())?;
        finish_update(
            ctx,
            params,
            report.clean_set.indices().to_vec(),
            trained,
            report.degenerate_gmms,
        )
    }
}

struct SmallLoss {
    keep_fraction: f64,
}

impl Method for SmallLoss {
    fn name(&self) -> &'static str {
        "small_loss"
    }

    fn local_update(&self, ctx: &UpdateContext<'_>) -> Result<ClientUpdate> {
        if ctx.in_warmup {
            return full_data_update(ctx);
        }
        let losses = per_example_losses(ctx.global, ctx.examples)?;
        let selected = small_loss_select(&losses, self.keep_fraction)?;
        let (params, trained) = train_on_subset(ctx, &selected)?;
        finish_update(ctx, params, selected, trained, 0)
    }
}

struct OracleClean;

impl Method for OracleClean {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn local_update(&self, ctx: &UpdateContext<'_>) -> Result<ClientUpdate> {
        let selected: Vec<usize> = (0..ctx.examples.len())
            .filter(|&i| ctx.examples[i].is_clean())
            .collect();
        let (params, trained) = train_on_subset(ctx, &selected)?;
        finish_update(ctx, params, selected, trained, 0)
    }
}
