//! Acceptance suite: each test checks one release criterion at a pinned
//! tolerance and prints a single pass/fail line (visible under
//! `cargo test --test acceptance -- --nocapture`).
//!
//! The tests share a lock so timing-sensitive and globally-instrumented
//! checks cannot interfere with each other.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::Rng;

use fedrn_core::data::{audit, make_blobs, LabeledExample};
use fedrn_core::experiment::{run_experiment, run_single, DatasetSpec, ExperimentSpec};
use fedrn_core::federation::{NeighborMode, NoisePlan, PartitionSpec, Simulation, SimulationConfig};
use fedrn_core::gmm::{fit_em, fit_em_traced, EmConfig};
use fedrn_core::metrics::RoundMetrics;
use fedrn_core::model::{
    average_params, init_mlp, mean_cross_entropy, mean_loss_gradients, Activation, ModelParams,
    TrainConfig,
};
use fedrn_core::reliability::{expertise_scores, similarity_matrix, top_k_neighbors};
use fedrn_core::rng::RngStream;
use fedrn_core::Result;

static GATE: Mutex<()> = Mutex::new(());

fn criterion(id: usize, name: &str, budget: Duration, body: impl FnOnce() + std::panic::UnwindSafe) {
    let _guard = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(body);
    let elapsed = start.elapsed();
    let status = if outcome.is_ok() && elapsed <= budget { "PASS" } else { "FAIL" };
    println!("criterion {id:02} ({name}): {status} in {elapsed:.2?} (budget {budget:?})");
    if let Err(panic) = outcome {
        std::panic::resume_unwind(panic);
    }
    assert!(elapsed <= budget, "criterion {id} exceeded its {budget:?} budget: {elapsed:?}");
}

/// Loss vectors covering bimodal mixtures and unimodal clusters.
fn random_loss_vector(tag: u64) -> Vec<f64> {
    let mut rng = RngStream::new(41_000).child(tag).rng();
    let n = rng.random_range(20..150);
    let bimodal = tag % 2 == 0;
    (0..n)
        .map(|_| {
            if bimodal && rng.random_range(0..2) == 0 {
                2.0 + rng.random_range(-0.5..0.5)
            } else {
                0.2 + rng.random_range(-0.15..0.15)
            }
        })
        .collect()
}

#[test]
fn criterion_01_gmm_em_soundness() {
    criterion(1, "GMM-EM soundness", Duration::from_secs(5), || {
        let cfg = EmConfig::default();

        for tag in 0..100u64 {
            let losses = random_loss_vector(tag);
            let (gmm, trace) = fit_em_traced(&losses, &cfg).unwrap();
            for pair in trace.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9,
                    "log-likelihood decreased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
            for &loss in losses.iter().take(20) {
                let [clean, noisy] = gmm.posteriors(loss);
                assert!((clean + noisy - 1.0).abs() <= 1e-12);
            }
        }

        // Bimodal fixture: clusters at 0.1 and 2.0 with +-1e-3 jitter.
        let mut rng = RngStream::new(42_000).rng();
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(0.1 + rng.random_range(-1e-3..1e-3));
        }
        for _ in 0..50 {
            losses.push(2.0 + rng.random_range(-1e-3..1e-3));
        }
        let mid = 1.05;
        let lo_mean = losses.iter().filter(|&&l| l <= mid).sum::<f64>() / 50.0;
        let hi_mean = losses.iter().filter(|&&l| l > mid).sum::<f64>() / 50.0;
        let gmm = fit_em(&losses, &cfg).unwrap();
        assert!((gmm.clean().mean - lo_mean).abs() < 0.05);
        assert!((gmm.noisy().mean - hi_mean).abs() < 0.05);
    });
}

/// Central finite differences over every parameter of the model.
fn fd_gradient(model: &ModelParams, examples: &[LabeledExample]) -> Vec<f64> {
    let flat = model.flatten();
    let h = 1e-5;
    (0..flat.len())
        .map(|j| {
            let mut plus = model.clone();
            let mut v = flat.clone();
            v[j] += h;
            plus.set_flat(&v).unwrap();
            let mut minus = model.clone();
            v[j] = flat[j] - h;
            minus.set_flat(&v).unwrap();
            (mean_cross_entropy(&plus, examples).unwrap() - mean_cross_entropy(&minus, examples).unwrap())
                / (2.0 * h)
        })
        .collect()
}

/// ReLU pre-activations within `margin` of zero would make central
/// differences unreliable; such draws are skipped deterministically.
fn clear_of_kinks(model: &ModelParams, examples: &[LabeledExample], margin: f64) -> bool {
    examples.iter().all(|e| {
        let mut a = e.features().clone();
        for layer in &model.feature_layers {
            let z = layer.weights.dot(&a) + &layer.bias;
            if layer.activation == Activation::Relu && z.iter().any(|v| v.abs() < margin) {
                return false;
            }
            a = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z,
            };
        }
        true
    })
}

#[test]
fn criterion_02_gradient_check() {
    criterion(2, "gradient check", Duration::from_secs(10), || {
        let mut checked = 0;
        let mut tag = 0u64;
        while checked < 20 {
            tag += 1;
            let stream = RngStream::new(43_000).child(tag);
            let model = init_mlp(4, &[5, 4], 3, stream);
            let mut rng = stream.child(1).rng();
            let examples: Vec<LabeledExample> = (0..5)
                .map(|i| {
                    let features = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
                    LabeledExample::new(features, i % 3, i % 3)
                })
                .collect();
            if !clear_of_kinks(&model, &examples, 1e-3) {
                continue;
            }
            let analytic = mean_loss_gradients(&model, &examples).unwrap().flatten();
            let numeric = fd_gradient(&model, &examples);
            for (a, f) in analytic.iter().zip(&numeric) {
                let scale = a.abs().max(f.abs()).max(1e-6);
                assert!(
                    (a - f).abs() / scale < 1e-4,
                    "model {tag}: analytic {a} vs finite difference {f}"
                );
            }
            checked += 1;
        }
    });
}

#[test]
fn criterion_03_aggregation_exactness() {
    criterion(3, "aggregation exactness", Duration::from_secs(5), || {
        for case in 0..50u64 {
            let stream = RngStream::new(44_000).child(case);
            let mut rng = stream.rng();
            let n = rng.random_range(2..6);
            let models: Vec<ModelParams> =
                (0..n).map(|i| init_mlp(3, &[4], 2, stream.child(10 + i as u64))).collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

            let avg = average_params(&models, &weights).unwrap();
            let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flatten()).collect();
            for (j, v) in avg.flatten().iter().enumerate() {
                let oracle: f64 = flats.iter().zip(&weights).map(|(f, w)| w * f[j]).sum();
                assert!((v - oracle).abs() <= 1e-12, "case {case} scalar {j}: {v} vs {oracle}");
            }
        }

        // Identical models aggregate to themselves exactly for weights that
        // are exact in binary.
        let model = init_mlp(3, &[4], 2, RngStream::new(44_500));
        for weights in [[0.5, 0.5], [1.0, 0.0]] {
            let avg = average_params(&[model.clone(), model.clone()], &weights).unwrap();
            assert_eq!(avg.flatten(), model.flatten());
        }
    });
}

#[test]
fn criterion_04_reliability_properties() {
    criterion(4, "reliability properties", Duration::from_secs(10), || {
        let mut rng = RngStream::new(45_000).rng();

        for _ in 0..20 {
            let n = rng.random_range(2..10);
            let preds: Vec<fedrn_core::model::Prediction> = (0..n)
                .map(|_| {
                    let mut v: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
                    let s: f64 = v.iter().sum();
                    v.iter_mut().for_each(|x| *x /= s);
                    fedrn_core::model::Prediction { probs: Array1::from_vec(v) }
                })
                .collect();
            let m = similarity_matrix(&preds).unwrap();
            for c in 0..n {
                for o in 0..n {
                    assert!((m[[c, o]] - m[[o, c]]).abs() <= 1e-12);
                }
            }

            let accs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let exp = expertise_scores(&accs).unwrap();
            let max = exp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = exp.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!((min, max), (0.0, 1.0), "expertise must span [0, 1]");

            // Normalized ensemble weights sum to one.
            let rel: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = rel.iter().sum();
            let sum: f64 = rel.iter().map(|r| r / total).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }

        for case in 0..1000u64 {
            let mut rng = RngStream::new(45_500).child(case).rng();
            let n = rng.random_range(3..12);
            let k = rng.random_range(1..n);
            let scores: Vec<(usize, f64)> =
                (0..n).map(|id| (id, (rng.random_range(0..7) as f64) / 6.0)).collect();
            let got = top_k_neighbors(&scores, k).unwrap();
            let mut oracle = scores.clone();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expect: Vec<usize> = oracle.into_iter().take(k).map(|(id, _)| id).collect();
            assert_eq!(got, expect, "case {case}");
        }
    });
}

/// The shared desk-scale setup for the directional criteria: 10 clients,
/// two shards each, full participation, and enough model capacity and
/// learning rate that local models start fitting their label noise.
fn desk_spec(noise_hi: f64, rounds: usize) -> ExperimentSpec {
    ExperimentSpec {
        dataset: DatasetSpec { num_classes: 10, per_class: 100, spread: 0.7, dim: 8 },
        sim: SimulationConfig {
            num_clients: 10,
            participation_rate: 1.0,
            rounds,
            warmup_rounds: Some(12),
            k: 2,
            alpha: 0.6,
            train: TrainConfig {
                learning_rate: 0.1,
                momentum: 0.5,
                local_epochs: 5,
                batch_size: 32,
                rng_stream: RngStream::new(0),
            },
            method: "fedrn".into(),
            partition: PartitionSpec::Shard { shards_per_client: 2 },
            noise: NoisePlan::Symmetric { lo: 0.0, hi: noise_hi },
            master_seed: 0,
            neighbor_mode: NeighborMode::Reliable,
            keep_fraction: 0.6,
            hidden_widths: vec![64, 64],
        },
        repeat: 1,
        output_dir: std::env::temp_dir(),
    }
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn final_accuracy(spec: &ExperimentSpec, method: &str, k: usize, seed: u64) -> f64 {
    let mut one = spec.clone();
    one.sim.method = method.into();
    one.sim.k = k;
    run_single(&one, seed).unwrap().last().unwrap().test_accuracy
}

fn seed_mean(spec: &ExperimentSpec, method: &str, k: usize) -> f64 {
    SEEDS.iter().map(|&s| final_accuracy(spec, method, k, s)).sum::<f64>() / SEEDS.len() as f64
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

#[test]
fn criterion_05_expertise_noise_correlation() {
    criterion(5, "expertise-noise correlation", Duration::from_secs(180), || {
        let spec = desk_spec(0.4, 12); // stop right after warm-up
        let mut total = 0.0;
        for &seed in &SEEDS {
            let (train, test) = make_blobs(
                spec.dataset.num_classes,
                spec.dataset.per_class,
                spec.dataset.spread,
                spec.dataset.dim,
                RngStream::new(seed).labeled("dataset"),
            )
            .unwrap();
            let mut cfg = spec.sim.clone();
            cfg.master_seed = seed;
            let mut sim = Simulation::new(cfg, train, test).unwrap();
            sim.run().unwrap();

            let cleanliness: Vec<f64> = sim.noise_rates().iter().map(|r| 1.0 - r).collect();
            let accuracies: Vec<f64> =
                (0..10).map(|c| sim.state().accuracies[&c]).collect();
            total += pearson(&cleanliness, &accuracies);
        }
        let mean = total / SEEDS.len() as f64;
        assert!(mean >= 0.8, "mean accuracy/cleanliness correlation {mean}");
    });
}

fn post_warmup_lp_lr(spec: &ExperimentSpec, k: usize, seed: u64) -> (f64, f64) {
    let mut one = spec.clone();
    one.sim.k = k;
    let rounds = run_single(&one, seed).unwrap();
    let warm = one.sim.warmup_len();
    let post: Vec<&RoundMetrics> = rounds.iter().filter(|r| r.round >= warm).collect();
    let lp = post.iter().filter_map(|r| r.label_precision).sum::<f64>() / post.len() as f64;
    let lr = post.iter().filter_map(|r| r.label_recall).sum::<f64>() / post.len() as f64;
    (lp, lr)
}

#[test]
fn criterion_06_selection_quality() {
    criterion(6, "selection quality", Duration::from_secs(600), || {
        let spec = desk_spec(0.8, 60);
        let mut lp_gain = 0.0;
        let mut lr_gain = 0.0;
        for &seed in &SEEDS {
            let (lp2, lr2) = post_warmup_lp_lr(&spec, 2, seed);
            let (lp0, lr0) = post_warmup_lp_lr(&spec, 0, seed);
            lp_gain += lp2 - lp0;
            lr_gain += lr2 - lr0;
        }
        lp_gain /= SEEDS.len() as f64;
        lr_gain /= SEEDS.len() as f64;
        assert!(lp_gain >= 0.03, "label precision gain over the no-neighbor baseline: {lp_gain}");
        assert!(lr_gain >= 0.03, "label recall gain over the no-neighbor baseline: {lr_gain}");
    });
}

#[test]
fn criterion_07_robustness_direction() {
    criterion(7, "robustness direction", Duration::from_secs(900), || {
        let spec = desk_spec(0.8, 60);
        let oracle = seed_mean(&spec, "oracle", 2);
        let k2 = seed_mean(&spec, "fedrn", 2);
        let k1 = seed_mean(&spec, "fedrn", 1);
        let fedavg = seed_mean(&spec, "fedavg", 2);
        assert!(
            oracle >= k2 && k2 >= k1 && k1 >= fedavg,
            "ordering violated: oracle {oracle}, k2 {k2}, k1 {k1}, fedavg {fedavg}"
        );
        assert!(
            k2 - fedavg >= 0.05,
            "neighbor selection should beat plain averaging by 5 points: k2 {k2}, fedavg {fedavg}"
        );
    });
}

#[test]
fn criterion_08_k_saturation() {
    criterion(8, "k saturation", Duration::from_secs(600), || {
        let spec = desk_spec(0.8, 60);
        let k3 = seed_mean(&spec, "fedrn", 3);
        let k2 = seed_mean(&spec, "fedrn", 2);
        assert!(
            k3 - k2 <= 0.02,
            "a third neighbor should add at most 2 points: k3 {k3}, k2 {k2}"
        );
    });
}

#[test]
fn criterion_09_reliable_beats_random_neighbors() {
    criterion(9, "reliable vs random neighbors", Duration::from_secs(600), || {
        let spec = desk_spec(0.8, 60);
        let reliable = seed_mean(&spec, "fedrn", 2);
        let mut random_spec = spec.clone();
        random_spec.sim.neighbor_mode = NeighborMode::Random;
        let random = seed_mean(&random_spec, "fedrn", 2);
        assert!(
            reliable >= random,
            "reliability ranking should not lose to random neighbors: {reliable} vs {random}"
        );
    });
}

#[test]
fn criterion_10_byte_identical_reruns() {
    criterion(10, "determinism", Duration::from_secs(300), || {
        let run_into = |dir: &std::path::Path| -> Result<Vec<(String, Vec<u8>)>> {
            let mut spec = desk_spec(0.6, 6);
            spec.sim.warmup_rounds = Some(2);
            spec.dataset.per_class = 60;
            spec.repeat = 2;
            spec.output_dir = dir.to_path_buf();
            run_experiment(&spec)?;
            let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)?
                .map(|e| {
                    let e = e.unwrap();
                    (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
                })
                .collect();
            files.sort();
            Ok(files)
        };
        // The default rayon pool is live here, so local updates and the two
        // repeat seeds execute in parallel in both runs.
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run_into(dir_a.path()).unwrap();
        let b = run_into(dir_b.path()).unwrap();
        assert_eq!(a.len(), 4, "expected 2 metrics files, aggregate, resolved spec");
        for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            if name_a == "resolved.spec" {
                // The echo records the output directory, which necessarily
                // differs between the two runs; everything else must match.
                let strip = |bytes: &[u8]| -> Vec<String> {
                    String::from_utf8_lossy(bytes)
                        .lines()
                        .filter(|l| !l.starts_with("output.dir"))
                        .map(str::to_owned)
                        .collect()
                };
                assert_eq!(strip(bytes_a), strip(bytes_b));
            } else {
                assert_eq!(bytes_a, bytes_b, "file {name_a} differs between reruns");
            }
        }
    });
}

#[test]
fn criterion_11_server_never_reads_raw_data() {
    criterion(11, "server privacy contract", Duration::from_secs(300), || {
        let spec = desk_spec(0.6, 8);
        let (train, test) = make_blobs(
            spec.dataset.num_classes,
            60,
            spec.dataset.spread,
            spec.dataset.dim,
            RngStream::new(5).labeled("dataset"),
        )
        .unwrap();
        let mut cfg = spec.sim.clone();
        cfg.warmup_rounds = Some(2);
        cfg.master_seed = 5;
        let mut sim = Simulation::new(cfg, train, test).unwrap();
        for _ in 0..3 {
            sim.step_round().unwrap();
        }

        // Sanity: the instrument does observe client-side reads.
        audit::arm();
        let plan = sim.prepare_round().unwrap();
        let after_prepare = audit::reads();
        let updates = sim.run_local_updates(&plan).unwrap();
        let after_clients = audit::reads();
        sim.apply_aggregation(&plan, &updates).unwrap();
        let after_aggregate = audit::reads();
        audit::disarm();

        assert!(!plan.in_warmup && !plan.neighbors.is_empty(), "round must exercise neighbor retrieval");
        assert_eq!(after_prepare, 0, "neighbor retrieval read example data {after_prepare} times");
        assert!(after_clients > 0, "instrument failed to observe client-side reads");
        assert_eq!(
            after_aggregate, after_clients,
            "aggregation read example data {} times",
            after_aggregate - after_clients
        );
    });
}
