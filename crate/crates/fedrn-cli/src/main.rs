//! `fedrn` — run, compare, and sweep federated noisy-label experiments.
//!
//! All science parameters live in the spec file; flags only override the
//! seed, method, and output directory. Exit codes: 0 success, 2 spec parse
//! error, 3 invariant violation, 4 runtime failure. Thread count is
//! controlled by `RAYON_NUM_THREADS`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedrn_core::error::Error;
use fedrn_core::experiment::{
    compare_methods, run_experiment, sweep_parameter, ExperimentSpec, SWEEPABLE,
};
use fedrn_core::federation::METHOD_REGISTRY;
use fedrn_core::metrics::write_json;

#[derive(Parser)]
#[command(name = "fedrn", version, about = "Federated learning simulator with noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment spec file (flat `section.key = value` lines).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; overrides `output.dir` from the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `run.seed` from the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Method tag; overrides `federation.method` from the spec.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the spec once per repeat seed and write metrics CSVs.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Additionally write per-seed metrics as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run several methods over identical seeds and tabulate final
    /// accuracies.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated method tags.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
    },
    /// Re-run the spec for each value of one parameter.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// One of: alpha, k, participation_rate, keep_fraction.
        #[arg(long)]
        param: String,
        /// Comma-separated numeric values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// List the registered methods.
    Methods,
}

fn load_spec(common: &CommonArgs) -> Result<ExperimentSpec, Error> {
    let mut spec = ExperimentSpec::parse_file(&common.spec)?;
    if let Some(out) = &common.out {
        spec.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        spec.sim.master_seed = seed;
    }
    if let Some(method) = &common.method {
        spec.sim.method = method.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { common, json } => {
            let spec = load_spec(&common)?;
            let summary = run_experiment(&spec)?;
            if json {
                for (seed, rounds) in summary.seeds.iter().zip(&summary.per_seed_metrics) {
                    write_json(rounds, &spec.output_dir.join(format!("metrics_seed{seed}.json")))?;
                }
            }
            match summary.mean_final_accuracy() {
                Some(mean) => println!(
                    "run complete: {} seed(s), mean final test accuracy {mean:.4}",
                    summary.seeds.len()
                ),
                None => println!("run complete: no rounds executed"),
            }
            println!("results in {}", spec.output_dir.display());
        }
        Command::Compare { common, methods } => {
            let spec = load_spec(&common)?;
            let summary = compare_methods(&spec, &methods)?;
            for (i, method) in summary.methods.iter().enumerate() {
                match summary.mean_for(i) {
                    Some(mean) => println!("{method}: mean final test accuracy {mean:.4}"),
                    None => println!("{method}: no rounds executed"),
                }
            }
            println!("comparison in {}", spec.output_dir.join("comparison.csv").display());
        }
        Command::Sweep { common, param, values } => {
            let spec = load_spec(&common)?;
            if !SWEEPABLE.contains(&param.as_str()) {
                return Err(Error::Config(format!(
                    "unknown sweep parameter {param:?}; choose one of: {}",
                    SWEEPABLE.join(", ")
                )));
            }
            let summary = sweep_parameter(&spec, &param, &values)?;
            println!(
                "swept {param} over {} value(s); results in {}",
                summary.values.len(),
                spec.output_dir.join(format!("sweep_{param}.csv")).display()
            );
        }
        Command::Methods => {
            for spec in METHOD_REGISTRY {
                println!("{:<12} {}", spec.name, spec.summary);
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::SpecParse { .. } => 2,
        Error::Config(_) | Error::Contract(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
