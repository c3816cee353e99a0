use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedlab::data::partition_report;
use fedlab::harness::{
    build_clients, desk_variant, load_data, parse_config, preset, resolve_out_dir, run_experiment, run_preset,
    run_toy, HarnessError, PresetKind, RunManifest, RunOptions,
};
use fedlab::model::{grad_check, init_params, Batch, ModelSpec};

#[derive(Parser)]
#[command(name = "fedlab", version, about = "Deterministic federated-learning simulation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a key=value config file.
    Run {
        config: PathBuf,
        /// Substitute synthetic data, an MLP and fewer rounds.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print or run a named preset.
    Preset {
        name: String,
        #[arg(long, conflicts_with = "run")]
        print: bool,
        #[arg(long)]
        run: bool,
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare backprop against central finite differences.
    Gradcheck {
        model: GradModel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
    /// Print per-client sample and class counts for a config's first seed.
    PartitionReport {
        config: PathBuf,
        #[arg(long)]
        desk: bool,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Write quadratic-sandbox trajectories (toy_fig1 or toy_fig8).
    Toy {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GradModel {
    Logistic,
    Mlp,
    /// The CNN on 3x8x8 inputs.
    Cnn,
    /// The CNN on full 3x32x32 inputs (slow).
    CnnFull,
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn read_config(path: &PathBuf, desk: bool) -> Result<fedlab::harness::ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let cfg = parse_config(&text)?;
    Ok(if desk { desk_variant(&cfg) } else { cfg })
}

fn report(manifests: &[RunManifest]) -> Result<(), HarnessError> {
    for m in manifests {
        for r in &m.repeats {
            match &r.error {
                None => println!("{}: seed {} completed {} rounds", m.name, r.seed, r.rounds_completed),
                Some(e) => eprintln!("{}: seed {} failed after {} rounds: {e}", m.name, r.seed, r.rounds_completed),
            }
        }
    }
    match manifests.iter().find_map(RunManifest::failure_code) {
        Some(3) => Err(HarnessError::io("run output", std::io::Error::other("a repeat failed on i/o"))),
        Some(_) => Err(HarnessError::Runtime("at least one repeat failed".into())),
        None => Ok(()),
    }
}

fn gradcheck(model: GradModel, seed: u64, epsilon: f64) -> Result<(), HarnessError> {
    let spec = match model {
        GradModel::Logistic => ModelSpec::logistic(8, 3),
        GradModel::Mlp => ModelSpec::mlp(8, vec![16, 8], 3),
        GradModel::Cnn => ModelSpec::paper_cnn(3, 8, 8, 10),
        GradModel::CnnFull => ModelSpec::paper_cnn(3, 32, 32, 10),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&spec, seed).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let n = 4;
    let dim = spec.input.len();
    let features = (0..n * dim).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let batch = Batch::new(features, labels, dim).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let r = grad_check(&spec, &params, &batch, epsilon).map_err(|e| HarnessError::config(None, e.to_string()))?;
    println!(
        "max_rel_error={:e} checked={} skipped_kinks={} worst_coordinate={:?}",
        r.max_rel_error, r.checked, r.skipped_kinks, r.worst_coordinate
    );
    if r.max_rel_error < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(HarnessError::Runtime(format!("gradient check above {GRAD_TOLERANCE:e}")))
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, desk, out, seed_offset, threads } => {
            let cfg = read_config(&config, desk)?;
            let out_dir = resolve_out_dir(out, cfg.out.as_deref(), &cfg.name);
            let m = run_experiment(&cfg, &RunOptions { out_dir: out_dir.clone(), seed_offset, threads })?;
            println!("wrote {}", out_dir.display());
            report(&[m])
        }
        Command::Preset { name, print: _, run, desk, out, seed_offset, threads } => {
            let p = preset(&name, desk)?;
            if !run {
                print!("{}", p.render());
                return Ok(());
            }
            let out_dir = resolve_out_dir(out, None, p.name);
            if let PresetKind::Toy(t) = p.kind {
                print!("{}", run_toy(t, &out_dir, seed_offset)?);
                return Ok(());
            }
            let ms = run_preset(&p, &RunOptions { out_dir: out_dir.clone(), seed_offset, threads })?;
            println!("wrote {}", out_dir.display());
            report(&ms)
        }
        Command::Gradcheck { model, seed, epsilon } => gradcheck(model, seed, epsilon),
        Command::PartitionReport { config, desk, seed_offset } => {
            let cfg = read_config(&config, desk)?;
            let seed = cfg.seeds[0].wrapping_add(seed_offset);
            let (train, _) = load_data(&cfg, seed)?;
            let shards = build_clients(&cfg, &train, seed)?;
            print!("{}", partition_report(train.labels(), &shards).to_csv());
            Ok(())
        }
        Command::Toy { name, out, seed } => {
            let p = preset(&name, false)?;
            let PresetKind::Toy(t) = p.kind else {
                return Err(HarnessError::config(None, format!("{name} is not a toy preset (toy_fig1, toy_fig8)")));
            };
            let out_dir = resolve_out_dir(out, None, p.name);
            print!("{}", run_toy(t, &out_dir, seed)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are configuration errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
