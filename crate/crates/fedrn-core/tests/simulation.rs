//! End-to-end behavior of the round loop: determinism, phase ordering,
//! method degenerations, and the checkpoint format.

use ndarray::Array1;

use fedrn_core::data::{make_blobs, Dataset, LabeledExample};
use fedrn_core::federation::{
    aggregate, build_method, run_simulation, NeighborMode, NoisePlan, PartitionSpec, Simulation,
    SimulationConfig, UpdateContext,
};
use fedrn_core::gmm::{fit_em, EmConfig};
use fedrn_core::metrics::{label_recall, to_csv_string};
use fedrn_core::model::{
    forward, init_mlp, per_example_losses, sgd_train, ModelParams, TrainConfig,
};
use fedrn_core::reliability::ProbeInput;
use fedrn_core::rng::RngStream;
use fedrn_core::selection::auxiliary_clean_set;
use fedrn_core::Error;

fn desk_config(method: &str, rounds: usize, noise_hi: f64) -> SimulationConfig {
    SimulationConfig {
        num_clients: 6,
        participation_rate: 1.0,
        rounds,
        warmup_rounds: Some(2),
        k: 2,
        alpha: 0.6,
        train: TrainConfig {
            learning_rate: 0.05,
            momentum: 0.5,
            local_epochs: 2,
            batch_size: 32,
            rng_stream: RngStream::new(0),
        },
        method: method.to_string(),
        partition: PartitionSpec::Shard { shards_per_client: 2 },
        noise: if noise_hi == 0.0 {
            NoisePlan::Clean
        } else {
            NoisePlan::Symmetric { lo: 0.0, hi: noise_hi }
        },
        master_seed: 7,
        neighbor_mode: NeighborMode::Reliable,
        keep_fraction: 0.6,
        hidden_widths: vec![16],
    }
}

fn desk_data(seed: u64) -> (Dataset, Dataset) {
    make_blobs(6, 60, 0.7, 4, RngStream::new(seed).labeled("dataset")).unwrap()
}

#[test]
fn zero_rounds_yield_empty_metrics_and_untouched_model() {
    let (train, test) = desk_data(1);
    let cfg = SimulationConfig { rounds: 0, warmup_rounds: Some(0), ..desk_config("fedrn", 0, 0.4) };
    let mut sim = Simulation::new(cfg.clone(), train.clone(), test.clone()).unwrap();
    let metrics = sim.run().unwrap();
    assert!(metrics.is_empty());
    assert_eq!(sim.state().round, 0);

    // The global model equals a freshly initialized one.
    let fresh = Simulation::new(cfg, train, test).unwrap();
    assert_eq!(sim.state().global, fresh.state().global);
}

#[test]
fn full_participation_samples_every_client() {
    let (train, test) = desk_data(2);
    let sim = Simulation::new(desk_config("fedavg", 1, 0.0), train, test).unwrap();
    assert_eq!(sim.sample_participants(0), vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(sim.sample_participants(3), sim.sample_participants(3));
}

#[test]
fn participant_sampling_frequencies_are_near_rate() {
    let (train, test) = make_blobs(10, 100, 1.0, 4, RngStream::new(3).labeled("dataset")).unwrap();
    let cfg = SimulationConfig {
        num_clients: 100,
        participation_rate: 0.1,
        partition: PartitionSpec::Dirichlet { beta: 10.0 },
        ..desk_config("fedavg", 1, 0.0)
    };
    let sim = Simulation::new(cfg, train, test).unwrap();
    let mut counts = vec![0usize; 100];
    for round in 0..1000 {
        let ids = sim.sample_participants(round);
        assert_eq!(ids.len(), 10);
        for id in ids {
            counts[id] += 1;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        let freq = n as f64 / 1000.0;
        assert!((0.05..=0.15).contains(&freq), "client {c} sampled at {freq}");
    }
}

#[test]
fn oracle_equals_fedavg_without_noise() {
    let (train, test) = desk_data(4);
    let a = run_simulation(desk_config("fedavg", 5, 0.0), train.clone(), test.clone()).unwrap();
    let b = run_simulation(desk_config("oracle", 5, 0.0), train, test).unwrap();
    assert_eq!(to_csv_string(&a), to_csv_string(&b));
}

#[test]
fn warmup_rounds_carry_no_neighbor_plans() {
    let (train, test) = desk_data(5);
    let mut sim = Simulation::new(desk_config("fedrn", 4, 0.6), train, test).unwrap();

    let plan = sim.prepare_round().unwrap();
    assert!(plan.in_warmup);
    assert!(plan.neighbors.is_empty());
    assert!(plan.table.is_none());

    sim.step_round().unwrap();
    sim.step_round().unwrap();

    // Past warm-up the plan carries a table and k neighbors per participant.
    let plan = sim.prepare_round().unwrap();
    assert!(!plan.in_warmup);
    assert!(plan.table.is_some());
    for c in &plan.participants {
        let neighbors = &plan.neighbors[c];
        assert_eq!(neighbors.len(), 2);
        assert!(neighbors.iter().all(|n| n.client != *c));
    }
}

#[test]
fn parallel_and_sequential_execution_agree_byte_for_byte() {
    let run_with_threads = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (train, test) = desk_data(6);
            run_simulation(desk_config("fedrn", 5, 0.6), train, test).unwrap()
        })
    };
    let sequential = run_with_threads(1);
    let parallel = run_with_threads(4);
    assert_eq!(to_csv_string(&sequential), to_csv_string(&parallel));
}

#[test]
fn aggregate_weights_by_data_size() {
    let models: Vec<ModelParams> = (0..3).map(|i| init_mlp(3, &[4], 2, RngStream::new(40 + i))).collect();

    let uniform = aggregate(&models, &[10, 10, 10]).unwrap();
    let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flatten()).collect();
    for (j, v) in uniform.flatten().iter().enumerate() {
        let mean = flats.iter().map(|f| f[j]).sum::<f64>() / 3.0;
        assert!((v - mean).abs() < 1e-12);
    }

    let weighted = aggregate(&models[..2], &[100, 300]).unwrap();
    for (j, v) in weighted.flatten().iter().enumerate() {
        let expect = 0.25 * flats[0][j] + 0.75 * flats[1][j];
        assert!((v - expect).abs() < 1e-12);
    }

    assert!(aggregate(&models, &[1, 2]).is_err());
    assert!(aggregate(&models, &[1, 0, 2]).is_err());
}

#[test]
fn config_validation_names_the_problem() {
    let (train, test) = desk_data(7);

    // m <= k.
    let cfg = SimulationConfig { k: 6, ..desk_config("fedrn", 3, 0.4) };
    match Simulation::new(cfg, train.clone(), test.clone()).err() {
        Some(Error::Config(msg)) => assert!(msg.contains("exceed k")),
        other => panic!("expected config error, got {other:?}"),
    }

    // fedrn needs at least one warm-up round to have server-side state.
    let cfg = SimulationConfig { warmup_rounds: Some(0), ..desk_config("fedrn", 3, 0.4) };
    assert!(matches!(Simulation::new(cfg, train.clone(), test.clone()), Err(Error::Config(_))));

    // Unknown method tags are rejected up front.
    let cfg = desk_config("fedprox", 3, 0.4);
    assert!(matches!(Simulation::new(cfg, train.clone(), test.clone()), Err(Error::Config(_))));

    let cfg = SimulationConfig { participation_rate: 0.0, ..desk_config("fedavg", 3, 0.4) };
    assert!(Simulation::new(cfg, train, test).is_err());
}

#[test]
fn checkpoint_round_trips_global_params() {
    let (train, test) = desk_data(8);
    let mut sim = Simulation::new(desk_config("fedavg", 2, 0.2), train, test).unwrap();
    sim.run().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("global.params");
    sim.save_checkpoint(&path).unwrap();
    let restored = ModelParams::from_text(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(&restored, &sim.state().global);
}

#[test]
fn reliability_table_csv_covers_seen_clients() {
    let (train, test) = desk_data(9);
    let mut sim = Simulation::new(desk_config("fedrn", 4, 0.4), train, test).unwrap();
    sim.step_round().unwrap();
    sim.step_round().unwrap();
    let plan = sim.prepare_round().unwrap();
    let table = plan.table.expect("past warm-up");
    let csv = table.similarity_csv();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), table.clients.len() + 1);
    assert_eq!(csv.lines().count(), table.clients.len() + 1);
}

/// Engineered clean client: a tight, fully clean two-class dataset whose
/// loss distribution under a well-trained model is a large near-zero bulk
/// plus a few harder examples.
fn clean_client_fixture() -> (ModelParams, Vec<LabeledExample>) {
    let mut rng = RngStream::new(99).rng();
    use rand::Rng;
    let mut examples = Vec::new();
    for i in 0..90 {
        let class = i % 2;
        let center = if class == 0 { 2.0 } else { -2.0 };
        let features = Array1::from_vec(vec![
            center + rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
        ]);
        examples.push(LabeledExample::new(features, class, class));
    }
    for i in 0..3 {
        // Near the boundary but correctly labeled.
        let class = i % 2;
        let x = if class == 0 { 0.25 } else { -0.25 };
        examples.push(LabeledExample::new(Array1::from_vec(vec![x, 0.0]), class, class));
    }
    let init = init_mlp(2, &[8], 2, RngStream::new(100));
    let trained = sgd_train(
        &init,
        &examples,
        &TrainConfig {
            learning_rate: 0.2,
            momentum: 0.5,
            local_epochs: 30,
            batch_size: 16,
            rng_stream: RngStream::new(101),
        },
    )
    .unwrap();
    (trained, examples)
}

#[test]
fn noise_free_client_keeps_nearly_all_data_and_matches_fedavg() {
    let (global, examples) = clean_client_fixture();
    let probe = ProbeInput::generate(2, RngStream::new(102));
    let cfg = SimulationConfig { k: 1, num_clients: 2, ..desk_config("fedrn", 1, 0.0) };
    let train_cfg = TrainConfig {
        learning_rate: 0.01,
        momentum: 0.0,
        local_epochs: 1,
        batch_size: 32,
        rng_stream: RngStream::new(103),
    };
    let ctx = UpdateContext {
        client: 0,
        round: 2,
        in_warmup: false,
        global: &global,
        examples: &examples,
        neighbors: &[],
        self_reliability: 1.0,
        train: train_cfg,
        probe: &probe,
        keep_fraction: 0.6,
    };

    let fedrn = build_method("fedrn", &cfg).unwrap().local_update(&ctx).unwrap();
    let recall = label_recall(&fedrn.selected, &examples).unwrap();
    assert!(recall >= 0.95, "label recall {recall}");
    assert!(fedrn.trained);

    // Side by side with the plain update: the models must agree nearly
    // everywhere on the client's own data.
    let fedavg = build_method("fedavg", &cfg).unwrap().local_update(&ctx).unwrap();
    let agree = examples
        .iter()
        .filter(|e| {
            forward(&fedrn.params, e.features()).unwrap().argmax()
                == forward(&fedavg.params, e.features()).unwrap().argmax()
        })
        .count();
    assert!(agree as f64 / examples.len() as f64 >= 0.95);
}

#[test]
fn fedrn_with_no_neighbors_matches_single_model_selection() {
    let (global, examples) = clean_client_fixture();
    let probe = ProbeInput::generate(2, RngStream::new(104));
    let cfg = SimulationConfig { k: 0, num_clients: 2, ..desk_config("fedrn", 1, 0.0) };
    let ctx = UpdateContext {
        client: 0,
        round: 2,
        in_warmup: false,
        global: &global,
        examples: &examples,
        neighbors: &[],
        self_reliability: 1.0,
        train: TrainConfig {
            learning_rate: 0.01,
            momentum: 0.0,
            local_epochs: 1,
            batch_size: 32,
            rng_stream: RngStream::new(105),
        },
        probe: &probe,
        keep_fraction: 0.6,
    };
    let update = build_method("fedrn", &cfg).unwrap().local_update(&ctx).unwrap();

    let losses = per_example_losses(&global, &examples).unwrap();
    let gmm = fit_em(&losses, &EmConfig::default()).unwrap();
    let aux = auxiliary_clean_set(&gmm, &losses);
    assert_eq!(update.selected, aux.indices());
}

#[test]
fn degenerate_client_skips_training_and_is_flagged() {
    // Every example identical: losses are one point, the mixture is
    // degenerate, every posterior ties at 0.5, and the strict threshold
    // empties the clean set.
    let features = Array1::from_vec(vec![1.0, -1.0]);
    let examples: Vec<LabeledExample> =
        (0..20).map(|_| LabeledExample::new(features.clone(), 1, 1)).collect();
    let global = init_mlp(2, &[8], 2, RngStream::new(110));
    let probe = ProbeInput::generate(2, RngStream::new(111));
    let cfg = SimulationConfig { k: 0, num_clients: 2, ..desk_config("fedrn", 1, 0.0) };
    let ctx = UpdateContext {
        client: 0,
        round: 2,
        in_warmup: false,
        global: &global,
        examples: &examples,
        neighbors: &[],
        self_reliability: 1.0,
        train: TrainConfig {
            learning_rate: 0.05,
            momentum: 0.0,
            local_epochs: 1,
            batch_size: 32,
            rng_stream: RngStream::new(112),
        },
        probe: &probe,
        keep_fraction: 0.6,
    };
    let update = build_method("fedrn", &cfg).unwrap().local_update(&ctx).unwrap();
    assert!(update.selected.is_empty());
    assert!(!update.trained);
    assert_eq!(update.params, global);
    assert_eq!(update.degenerate_gmms, 1);
}

#[test]
fn local_update_with_zero_epochs_returns_global() {
    let (train, test) = desk_data(10);
    let mut cfg = desk_config("fedavg", 1, 0.0);
    cfg.train.local_epochs = 0;
    let sim = Simulation::new(cfg, train, test).unwrap();
    let plan = sim.prepare_round().unwrap();
    let updates = sim.run_local_updates(&plan).unwrap();
    for u in &updates {
        assert_eq!(u.params, sim.state().global);
    }
    let again = sim.run_local_updates(&plan).unwrap();
    assert_eq!(updates.len(), again.len());
    for (a, b) in updates.iter().zip(&again) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.train_accuracy, b.train_accuracy);
        assert_eq!(a.probe_output, b.probe_output);
    }
}

#[test]
fn single_client_converges_on_separable_data() {
    let (train, test) = make_blobs(3, 80, 0.3, 4, RngStream::new(11).labeled("dataset")).unwrap();
    let cfg = SimulationConfig {
        num_clients: 1,
        k: 0,
        participation_rate: 1.0,
        rounds: 1,
        warmup_rounds: Some(0),
        train: TrainConfig {
            learning_rate: 0.1,
            momentum: 0.5,
            local_epochs: 5,
            batch_size: 32,
            rng_stream: RngStream::new(0),
        },
        partition: PartitionSpec::Shard { shards_per_client: 1 },
        noise: NoisePlan::Clean,
        ..desk_config("fedavg", 1, 0.0)
    };
    let sim = Simulation::new(cfg, train, test).unwrap();
    let plan = sim.prepare_round().unwrap();
    let updates = sim.run_local_updates(&plan).unwrap();
    assert!(updates[0].train_accuracy >= 0.95, "accuracy {}", updates[0].train_accuracy);
}

#[test]
fn fedrn_run_reports_selection_metrics_after_warmup() {
    let (train, test) = desk_data(12);
    let metrics = run_simulation(desk_config("fedrn", 5, 0.6), train, test).unwrap();
    assert_eq!(metrics.len(), 5);
    for m in &metrics {
        assert!(m.label_precision.is_some());
        assert!((0.0..=1.0).contains(&m.test_accuracy));
        assert_eq!(m.per_client_accuracy.len(), 6);
    }
    // Warm-up rounds train on everything.
    assert_eq!(metrics[0].label_recall, Some(1.0));
}
