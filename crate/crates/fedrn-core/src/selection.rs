//! Clean-set construction: single-model GMM selection, reliability-weighted
//! ensembles over neighbor models, and the small-loss baseline selector.

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::gmm::{clean_posterior, fit_em, EmConfig, Gmm1D2};
use crate::model::{fine_tune_head, per_example_losses, ModelParams, TrainConfig};

/// Examples whose clean probability exceeds 0.5, together with the full
/// probability vector they were thresholded from.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanSet {
    indices: Vec<usize>,
    clean_prob: Vec<f64>,
}

impl CleanSet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn clean_prob(&self) -> &[f64] {
        &self.clean_prob
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Threshold clean probabilities at a strict 0.5; an exact tie is excluded.
pub fn build_clean_set(clean_prob: &[f64]) -> CleanSet {
    // Convex combinations may drift past the unit interval by an ulp.
    debug_assert!(clean_prob.iter().all(|p| (-1e-9..=1.0 + 1e-9).contains(p)));
    let indices = clean_prob
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.5)
        .map(|(i, _)| i)
        .collect();
    CleanSet { indices, clean_prob: clean_prob.to_vec() }
}

/// Clean set according to the target model's own mixture only.
pub fn auxiliary_clean_set(target_gmm: &Gmm1D2, losses: &[f64]) -> CleanSet {
    let probs: Vec<f64> = losses.iter().map(|&l| clean_posterior(target_gmm, l)).collect();
    build_clean_set(&probs)
}

/// Reliability-weighted convex combination of per-model clean posteriors.
/// Weights are the reliabilities normalized to sum to 1.
pub fn ensemble_clean_prob(posteriors: &[Vec<f64>], reliabilities: &[f64]) -> Result<Vec<f64>> {
    if posteriors.is_empty() || posteriors.len() != reliabilities.len() {
        return Err(Error::contract("need one reliability per posterior vector"));
    }
    let len = posteriors[0].len();
    if posteriors.iter().any(|p| p.len() != len) {
        return Err(Error::contract("posterior vectors must align in length"));
    }
    if reliabilities.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::contract("reliabilities must be finite and nonnegative"));
    }
    let total: f64 = reliabilities.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("at least one reliability must be positive"));
    }
    let mut out = vec![0.0; len];
    for (posterior, &r) in posteriors.iter().zip(reliabilities) {
        let w = r / total;
        for (o, &p) in out.iter_mut().zip(posterior) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Indices of the `ceil(keep_fraction * n)` smallest losses; ties keep the
/// smaller index.
pub fn small_loss_select(losses: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(Error::contract("small_loss_select needs at least one loss"));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::contract(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    let keep = ((keep_fraction * losses.len() as f64).ceil() as usize).min(losses.len());
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].partial_cmp(&losses[b]).unwrap().then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(keep).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// What [`fedrn_select`] produced, with the bookkeeping the round metrics
/// want.
#[derive(Clone, Debug)]
pub struct SelectionReport {
    pub clean_set: CleanSet,
    pub auxiliary_size: usize,
    /// False when the auxiliary set was empty and neighbors were used as
    /// received.
    pub fine_tuned: bool,
    pub degenerate_gmms: usize,
}

/// Full neighbor-assisted selection pipeline:
///
/// 1. fit a mixture to the target model's losses and take its own clean set
///    as an auxiliary set;
/// 2. fine-tune each neighbor's classification head on the auxiliary set
///    for one epoch (skipped when the auxiliary set is empty);
/// 3. fit one mixture per model (target plus neighbors) over the full local
///    data;
/// 4. combine the per-model clean posteriors with normalized reliability
///    weights and threshold at 0.5.
///
/// `reliabilities[0]` belongs to the target model, the rest follow
/// `neighbors` in order. The target model itself is never fine-tuned, and
/// the caller's neighbor models are not modified.
pub fn fedrn_select(
    target: &ModelParams,
    neighbors: &[ModelParams],
    examples: &[LabeledExample],
    reliabilities: &[f64],
    cfg: &TrainConfig,
) -> Result<SelectionReport> {
    if examples.is_empty() {
        return Err(Error::contract("fedrn_select needs at least one example"));
    }
    if reliabilities.len() != neighbors.len() + 1 {
        return Err(Error::contract(format!(
            "expected {} reliabilities (target + neighbors), got {}",
            neighbors.len() + 1,
            reliabilities.len()
        )));
    }

    let em_cfg = EmConfig::default();
    let mut degenerate_gmms = 0;

    let target_losses = per_example_losses(target, examples)?;
    let target_gmm = fit_em(&target_losses, &em_cfg)?;
    degenerate_gmms += target_gmm.degenerate() as usize;
    let auxiliary = auxiliary_clean_set(&target_gmm, &target_losses);

    let aux_examples: Vec<LabeledExample> = auxiliary
        .indices()
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    let fine_tuned = !aux_examples.is_empty();

    let mut posteriors: Vec<Vec<f64>> = Vec::with_capacity(neighbors.len() + 1);
    posteriors.push(target_losses.iter().map(|&l| clean_posterior(&target_gmm, l)).collect());

    for (i, neighbor) in neighbors.iter().enumerate() {
        let model = if fine_tuned {
            let ft_cfg = TrainConfig {
                local_epochs: 1,
                rng_stream: cfg.rng_stream.labeled("finetune").child(i as u64),
                ..*cfg
            };
            fine_tune_head(neighbor, &aux_examples, &ft_cfg)?.model
        } else {
            neighbor.clone()
        };
        let losses = per_example_losses(&model, examples)?;
        let gmm = fit_em(&losses, &em_cfg)?;
        degenerate_gmms += gmm.degenerate() as usize;
        posteriors.push(losses.iter().map(|&l| clean_posterior(&gmm, l)).collect());
    }

    let ensembled = ensemble_clean_prob(&posteriors, reliabilities)?;
    Ok(SelectionReport {
        clean_set: build_clean_set(&ensembled),
        auxiliary_size: auxiliary.len(),
        fine_tuned,
        degenerate_gmms,
    })
}
