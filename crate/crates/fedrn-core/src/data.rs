//! Synthetic datasets, Non-IID client partitioning, and label-noise
//! injection with ground-truth bookkeeping.
//!
//! True labels are write-once: training and selection only ever read the
//! observed label, while evaluation code may consult the ground truth.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Counts reads of example payloads (features and labels). Armed by test
/// harnesses to verify that server-side code never inspects raw data.
pub mod audit {
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

    static ARMED: AtomicBool = AtomicBool::new(false);
    static READS: AtomicU64 = AtomicU64::new(0);

    pub fn arm() {
        READS.store(0, Ordering::SeqCst);
        ARMED.store(true, Ordering::SeqCst);
    }

    pub fn disarm() {
        ARMED.store(false, Ordering::SeqCst);
    }

    pub fn reads() -> u64 {
        READS.load(Ordering::SeqCst)
    }

    #[inline]
    pub(crate) fn record() {
        if ARMED.load(Ordering::Relaxed) {
            READS.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// A feature vector with its hidden ground-truth label and the observed
/// (possibly corrupted) label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    features: Array1<f64>,
    true_label: usize,
    observed_label: usize,
}

impl LabeledExample {
    pub fn new(features: Array1<f64>, true_label: usize, observed_label: usize) -> Self {
        LabeledExample { features, true_label, observed_label }
    }

    #[inline]
    pub fn features(&self) -> &Array1<f64> {
        audit::record();
        &self.features
    }

    #[inline]
    pub fn true_label(&self) -> usize {
        audit::record();
        self.true_label
    }

    #[inline]
    pub fn observed_label(&self) -> usize {
        audit::record();
        self.observed_label
    }

    /// Whether the observed label still matches the ground truth.
    pub fn is_clean(&self) -> bool {
        self.true_label() == self.observed_label()
    }

    fn corrupt(&mut self, new_label: usize) {
        self.observed_label = new_label;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Per-client example indices into a shared dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientPartition {
    assignments: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn new(assignments: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (c, idxs) in assignments.iter().enumerate() {
            if idxs.is_empty() {
                return Err(Error::config(format!("client {c} received no examples")));
            }
            for &i in idxs {
                if !seen.insert(i) {
                    return Err(Error::contract(format!("index {i} assigned to multiple clients")));
                }
            }
        }
        Ok(ClientPartition { assignments })
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, c: usize) -> &[usize] {
        &self.assignments[c]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.assignments.iter()
    }

    pub fn assigned_total(&self) -> usize {
        self.assignments.iter().map(|a| a.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Clean,
    Symmetric,
    Asymmetric,
}

/// Noise assignment for one client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientNoise {
    pub kind: NoiseKind,
    pub rate: f64,
}

/// Per-client noise plan plus the class map used for asymmetric flips.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub clients: Vec<ClientNoise>,
    pub asymmetric_map: Vec<usize>,
}

impl NoiseSpec {
    /// Map every class to the next one; keeps asymmetric flips structured
    /// without assuming a dataset-specific pairing.
    pub fn cyclic_map(num_classes: usize) -> Vec<usize> {
        (0..num_classes).map(|c| (c + 1) % num_classes).collect()
    }

    pub fn uniform(kind: NoiseKind, rates: &[f64], num_classes: usize) -> Self {
        NoiseSpec {
            clients: rates.iter().map(|&rate| ClientNoise { kind, rate }).collect(),
            asymmetric_map: Self::cyclic_map(num_classes),
        }
    }

    /// Symmetric noise on the first half of the clients, asymmetric on the
    /// rest.
    pub fn mixed(rates: &[f64], num_classes: usize) -> Self {
        let half = rates.len() / 2;
        let clients = rates
            .iter()
            .enumerate()
            .map(|(c, &rate)| ClientNoise {
                kind: if c < half { NoiseKind::Symmetric } else { NoiseKind::Asymmetric },
                rate,
            })
            .collect();
        NoiseSpec { clients, asymmetric_map: Self::cyclic_map(num_classes) }
    }

    pub fn clean(num_clients: usize, num_classes: usize) -> Self {
        NoiseSpec {
            clients: vec![ClientNoise { kind: NoiseKind::Clean, rate: 0.0 }; num_clients],
            asymmetric_map: Self::cyclic_map(num_classes),
        }
    }

    pub fn validate(&self, num_clients: usize, num_classes: usize) -> Result<()> {
        if self.clients.len() != num_clients {
            return Err(Error::config(format!(
                "noise spec covers {} clients, partition has {num_clients}",
                self.clients.len()
            )));
        }
        for (c, noise) in self.clients.iter().enumerate() {
            if !(0.0..=1.0).contains(&noise.rate) {
                return Err(Error::config(format!("client {c} noise rate {} outside [0, 1]", noise.rate)));
            }
        }
        let uses_asym = self.clients.iter().any(|n| n.kind == NoiseKind::Asymmetric);
        if uses_asym {
            if self.asymmetric_map.len() != num_classes {
                return Err(Error::config(format!(
                    "asymmetric map covers {} classes, dataset has {num_classes}",
                    self.asymmetric_map.len()
                )));
            }
            for (c, &to) in self.asymmetric_map.iter().enumerate() {
                if to >= num_classes {
                    return Err(Error::config(format!("asymmetric map sends class {c} to invalid class {to}")));
                }
                if to == c {
                    return Err(Error::config(format!("asymmetric map must move class {c} to a distinct class")));
                }
            }
        }
        Ok(())
    }
}

/// Distance from the origin at which class means are placed; independent of
/// `spread` so the spread knob directly controls cluster overlap.
const MEAN_RADIUS: f64 = 3.0;

/// Isotropic Gaussian clusters, one per class, split 90/10 into train and
/// test. Class means sit on a sphere of radius [`MEAN_RADIUS`], placed by the
/// seed; `spread` is the within-cluster standard deviation.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    spread: f64,
    dim: usize,
    stream: RngStream,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 {
        return Err(Error::config("make_blobs requires at least 2 classes"));
    }
    if per_class < 1 {
        return Err(Error::config("make_blobs requires at least 1 example per class"));
    }
    if dim < 2 {
        return Err(Error::config("make_blobs requires dim >= 2"));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::config(format!("spread must be positive, got {spread}")));
    }

    let mut mean_rng = stream.labeled("means").rng();
    let unit = Normal::<f64>::new(0.0, 1.0).expect("valid normal");
    let mut means: Vec<Array1<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        // Resample a few times to keep means apart; accept the best
        // candidate if the budget runs out (tight geometries in low dim).
        let mut best: Option<(f64, Array1<f64>)> = None;
        for _ in 0..64 {
            let raw = Array1::from_shape_fn(dim, |_| unit.sample(&mut mean_rng));
            let norm = raw.dot(&raw).sqrt();
            if norm < 1e-9 {
                continue;
            }
            let candidate = raw.mapv(|v| v * MEAN_RADIUS / norm);
            let min_dist = means
                .iter()
                .map(|m| {
                    let d = &candidate - m;
                    d.dot(&d).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if min_dist >= MEAN_RADIUS {
                best = Some((min_dist, candidate));
                break;
            }
            if best.as_ref().map_or(true, |(b, _)| min_dist > *b) {
                best = Some((min_dist, candidate));
            }
        }
        means.push(best.expect("mean sampling always yields a candidate").1);
    }

    let mut point_rng = stream.labeled("points").rng();
    let test_per_class = per_class / 10;
    let mut train = Vec::with_capacity(num_classes * (per_class - test_per_class));
    let mut test = Vec::with_capacity(num_classes * test_per_class);
    for (class, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            let features = Array1::from_shape_fn(dim, |d| mean[d] + spread * unit.sample(&mut point_rng));
            let example = LabeledExample::new(features, class, class);
            if i < per_class - test_per_class {
                train.push(example);
            } else {
                test.push(example);
            }
        }
    }
    Ok((
        Dataset { num_classes, feature_dim: dim, examples: train },
        Dataset { num_classes, feature_dim: dim, examples: test },
    ))
}

/// Sort by class label, cut into `num_clients * shards_per_client` equal
/// contiguous shards, and deal each client `shards_per_client` shards at
/// random. Trailing examples that do not fill a shard are dropped.
pub fn shard_partition(
    dataset: &Dataset,
    num_clients: usize,
    shards_per_client: usize,
    stream: RngStream,
) -> Result<ClientPartition> {
    if num_clients == 0 || shards_per_client == 0 {
        return Err(Error::config("shard partition requires clients >= 1 and shards_per_client >= 1"));
    }
    let shard_count = num_clients * shards_per_client;
    if shard_count > dataset.len() {
        return Err(Error::config(format!(
            "cannot cut {} examples into {shard_count} shards",
            dataset.len()
        )));
    }
    let shard_size = dataset.len() / shard_count;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| (dataset.examples[i].true_label(), i));

    let mut shard_ids: Vec<usize> = (0..shard_count).collect();
    shard_ids.shuffle(&mut stream.rng());

    let assignments = (0..num_clients)
        .map(|c| {
            let mut idxs: Vec<usize> = shard_ids[c * shards_per_client..(c + 1) * shards_per_client]
                .iter()
                .flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect();
            idxs.sort_unstable();
            idxs
        })
        .collect();
    ClientPartition::new(assignments)
}

/// For each class, split its examples across clients in proportions drawn
/// from Dirichlet(beta, ..., beta). Clients left empty are repaired by
/// moving one example at a time from the currently largest client.
pub fn dirichlet_partition(
    dataset: &Dataset,
    num_clients: usize,
    beta: f64,
    stream: RngStream,
) -> Result<ClientPartition> {
    if num_clients == 0 {
        return Err(Error::config("dirichlet partition requires at least one client"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::config(format!("beta must be positive, got {beta}")));
    }
    if dataset.len() < num_clients {
        return Err(Error::config(format!(
            "cannot spread {} examples over {num_clients} clients",
            dataset.len()
        )));
    }

    let mut rng = stream.rng();
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];

    for class in 0..dataset.num_classes {
        let mut idxs: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.examples[i].true_label() == class)
            .collect();
        if idxs.is_empty() {
            continue;
        }
        idxs.shuffle(&mut rng);

        // Dirichlet draw via normalized Gammas.
        let mut draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if total <= 0.0 {
            // All-zero draws are possible for tiny beta; fall back to uniform.
            draws = vec![1.0; num_clients];
        }
        let norm: f64 = draws.iter().sum();
        let shares: Vec<f64> = draws.iter().map(|d| d / norm).collect();

        // Largest-remainder rounding conserves the class size exactly.
        let n = idxs.len();
        let mut counts: Vec<usize> = shares.iter().map(|s| (s * n as f64).floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut remainders: Vec<(usize, f64)> = shares
            .iter()
            .enumerate()
            .map(|(c, s)| (c, s * n as f64 - counts[c] as f64))
            .collect();
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(c, _) in remainders.iter().take(n - assigned) {
            counts[c] += 1;
        }

        let mut cursor = 0;
        for (c, &count) in counts.iter().enumerate() {
            assignments[c].extend(&idxs[cursor..cursor + count]);
            cursor += count;
        }
    }

    // Repair empty clients.
    loop {
        let Some(empty) = assignments.iter().position(|a| a.is_empty()) else {
            break;
        };
        let largest = (0..num_clients)
            .max_by_key(|&c| (assignments[c].len(), std::cmp::Reverse(c)))
            .unwrap();
        if assignments[largest].len() <= 1 {
            return Err(Error::config("not enough examples to give every client at least one"));
        }
        let moved = assignments[largest].pop().unwrap();
        assignments[empty].push(moved);
    }

    for a in assignments.iter_mut() {
        a.sort_unstable();
    }
    ClientPartition::new(assignments)
}

/// Noise rate per client rising linearly from `lo` to `hi`.
pub fn linear_noise_schedule(num_clients: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if num_clients == 0 {
        return Err(Error::config("schedule requires at least one client"));
    }
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::config(format!("need 0 <= lo <= hi <= 1, got lo={lo}, hi={hi}")));
    }
    if num_clients == 1 {
        return Ok(vec![(lo + hi) / 2.0]);
    }
    Ok((0..num_clients)
        .map(|i| lo + (hi - lo) * i as f64 / (num_clients - 1) as f64)
        .collect())
}

/// Corrupt observed labels client by client. Exactly `round(rate * n)`
/// examples per client are flipped, chosen without replacement; symmetric
/// flips land uniformly on the other classes, asymmetric flips follow the
/// class map. Ground-truth labels and features are never touched.
pub fn inject_noise(
    dataset: &Dataset,
    partition: &ClientPartition,
    spec: &NoiseSpec,
    stream: RngStream,
) -> Result<Dataset> {
    spec.validate(partition.num_clients(), dataset.num_classes)?;
    let num_classes = dataset.num_classes;
    let mut out = dataset.clone();

    for (client, noise) in spec.clients.iter().enumerate() {
        if noise.kind == NoiseKind::Clean || noise.rate == 0.0 {
            continue;
        }
        let idxs = partition.client(client);
        let n = idxs.len();
        let count = ((noise.rate * n as f64).round() as usize).min(n);
        if count == 0 {
            continue;
        }
        let mut rng = stream.child(client as u64).rng();
        let mut chosen = rand::seq::index::sample(&mut rng, n, count).into_vec();
        chosen.sort_unstable();
        for pos in chosen {
            let i = idxs[pos];
            let truth = out.examples[i].true_label();
            let flipped = match noise.kind {
                NoiseKind::Symmetric => {
                    // Uniform over the other classes so the nominal rate is
                    // the realized rate.
                    let r = rng.random_range(0..num_classes - 1);
                    if r >= truth {
                        r + 1
                    } else {
                        r
                    }
                }
                NoiseKind::Asymmetric => spec.asymmetric_map[truth],
                NoiseKind::Clean => unreachable!(),
            };
            out.examples[i].corrupt(flipped);
        }
    }
    Ok(out)
}

/// One example per line: comma-separated features, then the true and
/// observed labels. Floats use the shortest exact representation.
pub fn dataset_to_text(dataset: &Dataset) -> String {
    let mut out = String::new();
    for ex in &dataset.examples {
        let mut fields: Vec<String> = ex.features().iter().map(|f| format!("{f}")).collect();
        fields.push(ex.true_label().to_string());
        fields.push(ex.observed_label().to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn dataset_from_text(text: &str, num_classes: usize) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut feature_dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::contract(format!("line {}: expected features and two labels", lineno + 1)));
        }
        let dim = fields.len() - 2;
        if *feature_dim.get_or_insert(dim) != dim {
            return Err(Error::contract(format!("line {}: inconsistent feature dimension", lineno + 1)));
        }
        let features = fields[..dim]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::contract(format!("line {}: bad float {f:?}", lineno + 1))))
            .collect::<Result<Vec<f64>>>()?;
        let parse_label = |s: &str| -> Result<usize> {
            let v = s
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::contract(format!("line {}: bad label {s:?}", lineno + 1)))?;
            if v >= num_classes {
                return Err(Error::contract(format!("line {}: label {v} outside [0, {num_classes})", lineno + 1)));
            }
            Ok(v)
        };
        let true_label = parse_label(fields[dim])?;
        let observed_label = parse_label(fields[dim + 1])?;
        examples.push(LabeledExample::new(Array1::from_vec(features), true_label, observed_label));
    }
    let feature_dim = feature_dim.ok_or_else(|| Error::contract("empty dataset text"))?;
    Ok(Dataset { num_classes, feature_dim, examples })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_text(dataset))?;
    Ok(())
}

pub fn read_dataset(path: &Path, num_classes: usize) -> Result<Dataset> {
    dataset_from_text(&std::fs::read_to_string(path)?, num_classes)
}
