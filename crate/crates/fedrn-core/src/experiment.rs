//! Experiment specs and drivers: flat key-value spec files, seeded repeat
//! runs, method comparisons, and parameter sweeps, all exported as CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::make_blobs;
use crate::error::{Error, Result};
use crate::federation::{
    method_names, run_simulation, NeighborMode, NoisePlan, PartitionSpec, SimulationConfig,
};
use crate::metrics::{to_csv_string, RoundMetrics};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub spread: f64,
    pub dim: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { num_classes: 10, per_class: 100, spread: 1.0, dim: 8 }
    }
}

/// A full experiment: dataset, simulation config, seed repeats, output
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub sim: SimulationConfig,
    pub repeat: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            dataset: DatasetSpec::default(),
            sim: SimulationConfig::default(),
            repeat: 1,
            output_dir: PathBuf::from("results"),
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::SpecParse { line, message: message.into() }
}

impl ExperimentSpec {
    /// Parse the flat `section.key = value` format. Unknown keys are
    /// errors; missing keys keep their defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut spec = ExperimentSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(lineno, format!("expected 'key = value', got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(parse_err(lineno, format!("empty value for {key}")));
            }
            spec.apply(key, value, lineno)?;
        }
        Ok(spec)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
            value
                .parse()
                .map_err(|_| parse_err(line, format!("invalid value {value:?} for {key}")))
        }

        match key {
            "dataset.num_classes" => self.dataset.num_classes = num(key, value, line)?,
            "dataset.per_class" => self.dataset.per_class = num(key, value, line)?,
            "dataset.spread" => self.dataset.spread = num(key, value, line)?,
            "dataset.dim" => self.dataset.dim = num(key, value, line)?,
            "partition.kind" => {
                self.sim.partition = match value {
                    "shard" => PartitionSpec::Shard {
                        shards_per_client: match self.sim.partition {
                            PartitionSpec::Shard { shards_per_client } => shards_per_client,
                            _ => 2,
                        },
                    },
                    "dirichlet" => PartitionSpec::Dirichlet {
                        beta: match self.sim.partition {
                            PartitionSpec::Dirichlet { beta } => beta,
                            _ => 0.5,
                        },
                    },
                    other => return Err(parse_err(line, format!("unknown partition kind {other:?}"))),
                }
            }
            "partition.shards_per_client" => {
                let s: usize = num(key, value, line)?;
                self.sim.partition = PartitionSpec::Shard { shards_per_client: s };
            }
            "partition.beta" => {
                let beta: f64 = num(key, value, line)?;
                self.sim.partition = PartitionSpec::Dirichlet { beta };
            }
            "noise.kind" => {
                let (lo, hi) = self.noise_bounds();
                self.sim.noise = match value {
                    "clean" => NoisePlan::Clean,
                    "symmetric" => NoisePlan::Symmetric { lo, hi },
                    "asymmetric" => NoisePlan::Asymmetric { lo, hi },
                    "mixed" => NoisePlan::Mixed { lo, hi },
                    other => return Err(parse_err(line, format!("unknown noise kind {other:?}"))),
                };
            }
            "noise.lo" => {
                let lo: f64 = num(key, value, line)?;
                let (_, hi) = self.noise_bounds();
                self.set_noise_bounds(lo, hi);
            }
            "noise.hi" => {
                let hi: f64 = num(key, value, line)?;
                let (lo, _) = self.noise_bounds();
                self.set_noise_bounds(lo, hi);
            }
            "federation.num_clients" => self.sim.num_clients = num(key, value, line)?,
            "federation.participation_rate" => self.sim.participation_rate = num(key, value, line)?,
            "federation.rounds" => self.sim.rounds = num(key, value, line)?,
            "federation.warmup_rounds" => {
                self.sim.warmup_rounds = if value == "auto" {
                    None
                } else {
                    Some(num(key, value, line)?)
                };
            }
            "federation.method" => self.sim.method = value.to_string(),
            "federation.k" => self.sim.k = num(key, value, line)?,
            "federation.alpha" => self.sim.alpha = num(key, value, line)?,
            "federation.neighbors" => {
                self.sim.neighbor_mode = match value {
                    "reliable" => NeighborMode::Reliable,
                    "random" => NeighborMode::Random,
                    other => return Err(parse_err(line, format!("unknown neighbor mode {other:?}"))),
                };
            }
            "federation.keep_fraction" => self.sim.keep_fraction = num(key, value, line)?,
            "train.learning_rate" => self.sim.train.learning_rate = num(key, value, line)?,
            "train.momentum" => self.sim.train.momentum = num(key, value, line)?,
            "train.local_epochs" => self.sim.train.local_epochs = num(key, value, line)?,
            "train.batch_size" => self.sim.train.batch_size = num(key, value, line)?,
            "train.hidden" => {
                self.sim.hidden_widths = value
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| parse_err(line, format!("invalid hidden width {v:?}")))
                    })
                    .collect::<Result<_>>()?;
            }
            "run.seed" => self.sim.master_seed = num(key, value, line)?,
            "run.repeat" => self.repeat = num(key, value, line)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            other => return Err(parse_err(line, format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn noise_bounds(&self) -> (f64, f64) {
        match self.sim.noise {
            NoisePlan::Clean => (0.0, 0.0),
            NoisePlan::Symmetric { lo, hi }
            | NoisePlan::Asymmetric { lo, hi }
            | NoisePlan::Mixed { lo, hi } => (lo, hi),
        }
    }

    fn set_noise_bounds(&mut self, lo: f64, hi: f64) {
        self.sim.noise = match self.sim.noise {
            NoisePlan::Clean => NoisePlan::Clean,
            NoisePlan::Symmetric { .. } => NoisePlan::Symmetric { lo, hi },
            NoisePlan::Asymmetric { .. } => NoisePlan::Asymmetric { lo, hi },
            NoisePlan::Mixed { .. } => NoisePlan::Mixed { lo, hi },
        };
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeat == 0 {
            return Err(Error::config("run.repeat must be >= 1"));
        }
        if self.dataset.num_classes < 2 {
            return Err(Error::config("dataset.num_classes must be >= 2"));
        }
        if self.dataset.per_class < 1 {
            return Err(Error::config("dataset.per_class must be >= 1"));
        }
        if self.dataset.dim < 2 {
            return Err(Error::config("dataset.dim must be >= 2"));
        }
        if !(self.dataset.spread.is_finite() && self.dataset.spread > 0.0) {
            return Err(Error::config("dataset.spread must be positive"));
        }
        if !method_names().contains(&self.sim.method.as_str()) {
            return Err(Error::config(format!(
                "federation.method {:?} is not one of: {}",
                self.sim.method,
                method_names().join(", ")
            )));
        }
        self.sim.validate()
    }

    /// Echo of the spec with every field resolved, in a fixed key order.
    /// Reparsing the echo reproduces the same experiment.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let (noise_kind, (lo, hi)) = match self.sim.noise {
            NoisePlan::Clean => ("clean", (0.0, 0.0)),
            NoisePlan::Symmetric { lo, hi } => ("symmetric", (lo, hi)),
            NoisePlan::Asymmetric { lo, hi } => ("asymmetric", (lo, hi)),
            NoisePlan::Mixed { lo, hi } => ("mixed", (lo, hi)),
        };
        writeln!(out, "dataset.num_classes = {}", self.dataset.num_classes).unwrap();
        writeln!(out, "dataset.per_class = {}", self.dataset.per_class).unwrap();
        writeln!(out, "dataset.spread = {}", self.dataset.spread).unwrap();
        writeln!(out, "dataset.dim = {}", self.dataset.dim).unwrap();
        match self.sim.partition {
            PartitionSpec::Shard { shards_per_client } => {
                writeln!(out, "partition.kind = shard").unwrap();
                writeln!(out, "partition.shards_per_client = {shards_per_client}").unwrap();
            }
            PartitionSpec::Dirichlet { beta } => {
                writeln!(out, "partition.kind = dirichlet").unwrap();
                writeln!(out, "partition.beta = {beta}").unwrap();
            }
        }
        writeln!(out, "noise.kind = {noise_kind}").unwrap();
        writeln!(out, "noise.lo = {lo}").unwrap();
        writeln!(out, "noise.hi = {hi}").unwrap();
        writeln!(out, "federation.num_clients = {}", self.sim.num_clients).unwrap();
        writeln!(out, "federation.participation_rate = {}", self.sim.participation_rate).unwrap();
        writeln!(out, "federation.rounds = {}", self.sim.rounds).unwrap();
        writeln!(out, "federation.warmup_rounds = {}", self.sim.warmup_len()).unwrap();
        writeln!(out, "federation.method = {}", self.sim.method).unwrap();
        writeln!(out, "federation.k = {}", self.sim.k).unwrap();
        writeln!(out, "federation.alpha = {}", self.sim.alpha).unwrap();
        writeln!(
            out,
            "federation.neighbors = {}",
            match self.sim.neighbor_mode {
                NeighborMode::Reliable => "reliable",
                NeighborMode::Random => "random",
            }
        )
        .unwrap();
        writeln!(out, "federation.keep_fraction = {}", self.sim.keep_fraction).unwrap();
        writeln!(out, "train.learning_rate = {}", self.sim.train.learning_rate).unwrap();
        writeln!(out, "train.momentum = {}", self.sim.train.momentum).unwrap();
        writeln!(out, "train.local_epochs = {}", self.sim.train.local_epochs).unwrap();
        writeln!(out, "train.batch_size = {}", self.sim.train.batch_size).unwrap();
        writeln!(
            out,
            "train.hidden = {}",
            self.sim
                .hidden_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )
        .unwrap();
        writeln!(out, "run.seed = {}", self.sim.master_seed).unwrap();
        writeln!(out, "run.repeat = {}", self.repeat).unwrap();
        writeln!(out, "output.dir = {}", self.output_dir.display()).unwrap();
        out
    }

    /// The master seeds of the repeat set.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeat as u64)
            .map(|i| self.sim.master_seed.wrapping_add(i))
            .collect()
    }
}

/// One full simulation for one seed: dataset generation, partitioning,
/// noise injection, and the round loop all derive from the seed.
pub fn run_single(spec: &ExperimentSpec, seed: u64) -> Result<Vec<RoundMetrics>> {
    let (train, test) = make_blobs(
        spec.dataset.num_classes,
        spec.dataset.per_class,
        spec.dataset.spread,
        spec.dataset.dim,
        RngStream::new(seed).labeled("dataset"),
    )?;
    let mut cfg = spec.sim.clone();
    cfg.master_seed = seed;
    run_simulation(cfg, train, test)
}

fn final_accuracy(rounds: &[RoundMetrics]) -> Option<f64> {
    rounds.last().map(|r| r.test_accuracy)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub per_seed_metrics: Vec<Vec<RoundMetrics>>,
    pub final_accuracies: Vec<f64>,
}

impl RunSummary {
    pub fn mean_final_accuracy(&self) -> Option<f64> {
        if self.final_accuracies.is_empty() {
            None
        } else {
            Some(mean_std(&self.final_accuracies).0)
        }
    }
}

/// Run the spec for every seed of the repeat set; writes one metrics CSV
/// per seed, the aggregate CSV, and the resolved spec echo.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunSummary> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.output_dir)?;
    std::fs::write(spec.output_dir.join("resolved.spec"), spec.resolved_text())?;

    let seeds = spec.seeds();
    let per_seed_metrics: Vec<Vec<RoundMetrics>> = seeds
        .par_iter()
        .map(|&seed| run_single(spec, seed))
        .collect::<Result<_>>()?;

    let mut aggregate = String::from("seed,final_test_accuracy\n");
    let mut finals = Vec::new();
    for (seed, rounds) in seeds.iter().zip(&per_seed_metrics) {
        std::fs::write(
            spec.output_dir.join(format!("metrics_seed{seed}.csv")),
            to_csv_string(rounds),
        )?;
        if let Some(acc) = final_accuracy(rounds) {
            writeln!(aggregate, "{seed},{acc}").unwrap();
            finals.push(acc);
        }
    }
    if !finals.is_empty() {
        let (mean, std) = mean_std(&finals);
        writeln!(aggregate, "mean,{mean}").unwrap();
        writeln!(aggregate, "std,{std}").unwrap();
    }
    std::fs::write(spec.output_dir.join("aggregate.csv"), aggregate)?;

    Ok(RunSummary { seeds, per_seed_metrics, final_accuracies: finals })
}

#[derive(Clone, Debug)]
pub struct CompareSummary {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// `finals[seed_index][method_index]`.
    pub finals: Vec<Vec<f64>>,
}

impl CompareSummary {
    pub fn mean_for(&self, method_index: usize) -> Option<f64> {
        if self.finals.is_empty() {
            return None;
        }
        let col: Vec<f64> = self.finals.iter().map(|row| row[method_index]).collect();
        Some(mean_std(&col).0)
    }
}

/// Run several methods over identical seeds (hence identical datasets,
/// partitions, and noise) and tabulate final accuracies side by side.
pub fn compare_methods(spec: &ExperimentSpec, methods: &[String]) -> Result<CompareSummary> {
    if methods.len() < 2 {
        return Err(Error::config("compare needs at least 2 methods"));
    }
    for m in methods {
        let mut probe = spec.clone();
        probe.sim.method = m.clone();
        probe.validate()?;
    }
    std::fs::create_dir_all(&spec.output_dir)?;
    std::fs::write(spec.output_dir.join("resolved.spec"), spec.resolved_text())?;

    let seeds = spec.seeds();
    let jobs: Vec<(usize, u64)> = seeds.iter().copied().enumerate().collect();
    let rows: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(_, seed)| {
            methods
                .iter()
                .map(|m| {
                    let mut one = spec.clone();
                    one.sim.method = m.clone();
                    let rounds = run_single(&one, seed)?;
                    Ok(final_accuracy(&rounds))
                })
                .collect::<Result<Vec<Option<f64>>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|row| row.into_iter().flatten().collect::<Vec<f64>>())
        .collect();

    let mut csv = format!("seed,{}\n", methods.join(","));
    let mut finals: Vec<Vec<f64>> = Vec::new();
    for (seed, row) in seeds.iter().zip(&rows) {
        if row.len() == methods.len() {
            csv.push_str(&seed.to_string());
            for acc in row {
                write!(csv, ",{acc}").unwrap();
            }
            csv.push('\n');
            finals.push(row.clone());
        }
    }
    if !finals.is_empty() {
        for (label, pick) in [("mean", 0usize), ("std", 1usize)] {
            csv.push_str(label);
            for m in 0..methods.len() {
                let col: Vec<f64> = finals.iter().map(|row| row[m]).collect();
                let stats = mean_std(&col);
                let v = if pick == 0 { stats.0 } else { stats.1 };
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
    }
    std::fs::write(spec.output_dir.join("comparison.csv"), csv)?;

    Ok(CompareSummary { methods: methods.to_vec(), seeds, finals })
}

pub const SWEEPABLE: &[&str] = &["alpha", "k", "participation_rate", "keep_fraction"];

fn apply_sweep_value(cfg: &mut SimulationConfig, param: &str, value: f64) -> Result<()> {
    match param {
        "alpha" => cfg.alpha = value,
        "k" => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(Error::config(format!("k must be a nonnegative integer, got {value}")));
            }
            cfg.k = value as usize;
        }
        "participation_rate" => cfg.participation_rate = value,
        "keep_fraction" => cfg.keep_fraction = value,
        other => {
            return Err(Error::config(format!(
                "unknown sweep parameter {other:?}; choose one of: {}",
                SWEEPABLE.join(", ")
            )))
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub parameter: String,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `finals[value_index][seed_index]`.
    pub finals: Vec<Vec<f64>>,
}

/// Re-run the experiment once per parameter value, seeds held fixed.
pub fn sweep_parameter(spec: &ExperimentSpec, param: &str, values: &[f64]) -> Result<SweepSummary> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    for &v in values {
        let mut probe = spec.clone();
        apply_sweep_value(&mut probe.sim, param, v)?;
        probe.validate()?;
    }
    std::fs::create_dir_all(&spec.output_dir)?;
    std::fs::write(spec.output_dir.join("resolved.spec"), spec.resolved_text())?;

    let seeds = spec.seeds();
    let finals: Vec<Vec<f64>> = values
        .par_iter()
        .map(|&v| {
            let mut one = spec.clone();
            apply_sweep_value(&mut one.sim, param, v)?;
            seeds
                .iter()
                .map(|&seed| Ok(final_accuracy(&run_single(&one, seed)?)))
                .collect::<Result<Vec<Option<f64>>>>()
                .map(|row| row.into_iter().flatten().collect::<Vec<f64>>())
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("value");
    for seed in &seeds {
        write!(csv, ",seed_{seed}").unwrap();
    }
    csv.push_str(",mean,std\n");
    let mut any_rows = false;
    for (v, row) in values.iter().zip(&finals) {
        if row.len() != seeds.len() {
            continue;
        }
        any_rows = true;
        write!(csv, "{v}").unwrap();
        for acc in row {
            write!(csv, ",{acc}").unwrap();
        }
        let (mean, std) = mean_std(row);
        writeln!(csv, ",{mean},{std}").unwrap();
    }
    if !any_rows {
        // No finished rounds (rounds = 0): emit the header only.
        csv = String::from("value,mean,std\n");
    }
    std::fs::write(spec.output_dir.join(format!("sweep_{param}.csv")), csv)?;

    Ok(SweepSummary { parameter: param.to_string(), values: values.to_vec(), seeds, finals })
}
