use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, ModelChoice, PartitionSpec};
use super::presets::{Preset, PresetKind, ToyPreset, DESK_HIDDEN, DESK_ROUNDS};
use super::HarnessError;
use crate::data::{
    load_cifar10, partition_dirichlet, partition_iid_balanced, partition_sgm, synth_blobs_split, BlobParams,
    ClientShard, Dataset,
};
use crate::diagnostics::RoundMetrics;
use crate::model::init_params;
use crate::optim::{fedavg_run_with, local_sgd, LocalSgdConfig, OptimError, RoundContext};
use crate::toy::{self, DescentMode, QuadObjective};

pub const METRICS_HEADER: [&str; 5] = ["round", "test_acc", "test_loss", "train_loss_mean", "participants"];
pub const CLIENTS_HEADER: [&str; 3] = ["round", "client_id", "train_loss"];
pub const COSINE_HEADER: [&str; 5] = ["round", "layer", "mean_cos", "pair_count", "excluded_pairs"];
pub const AGGREGATE_HEADER: [&str; 10] = [
    "round",
    "acc_mean",
    "acc_min",
    "acc_max",
    "loss_mean",
    "loss_min",
    "loss_max",
    "train_mean",
    "train_min",
    "train_max",
];

/// Environment variable naming the output directory; `--out` wins over it.
pub const OUT_ENV: &str = "FEDLAB_OUT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Added to every configured seed.
    pub seed_offset: u64,
    /// Overrides the configured thread count.
    pub threads: Option<usize>,
}

/// Output directory: the command-line flag, then [`OUT_ENV`], then the
/// config's `out` key, then `runs/<name>`.
pub fn resolve_out_dir(flag: Option<PathBuf>, cfg_out: Option<&Path>, name: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg_out.map(Path::to_path_buf))
        .unwrap_or_else(|| Path::new("runs").join(name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub seed: u64,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
    pub rounds_completed: usize,
    pub error: Option<String>,
    /// Exit-code class of the error, if any.
    pub error_code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub version: String,
    pub config: String,
    pub seed_offset: u64,
    pub threads: usize,
    pub wall_clock_secs: f64,
    pub repeats: Vec<RepeatRecord>,
    pub aggregate: String,
}

impl RunManifest {
    /// Exit code of the first failed repeat, if any.
    pub fn failure_code(&self) -> Option<i32> {
        self.repeats.iter().find_map(|r| r.error_code)
    }
}

/// Generic desk substitution for a config file: synthetic blobs in place of
/// CIFAR-10, an MLP in place of the CNN and at most [`DESK_ROUNDS`] rounds.
pub fn desk_variant(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    if let DatasetSpec::Cifar10 { .. } = c.dataset {
        c.dataset = DatasetSpec::SYNTH_DEFAULT;
    }
    if c.model == ModelChoice::Cnn {
        c.model = ModelChoice::Mlp(vec![DESK_HIDDEN]);
    }
    c.rounds = c.rounds.min(DESK_ROUNDS);
    c
}

/// Train and test sets of one repeat.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset), HarnessError> {
    match &cfg.dataset {
        DatasetSpec::Cifar10 { path } => Ok(load_cifar10(path)?),
        &DatasetSpec::Synth { n, n_test, classes, dim, spread } => {
            Ok(synth_blobs_split(&BlobParams { classes, dim, spread }, n, n_test, seed)?)
        }
    }
}

/// Partition of one repeat.
pub fn build_clients(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<Vec<ClientShard>, HarnessError> {
    let labels = train.labels();
    Ok(match cfg.partition {
        PartitionSpec::Iid => partition_iid_balanced(labels, cfg.clients, seed)?,
        PartitionSpec::Sgm(s) => partition_sgm(labels, cfg.clients, s, seed)?,
        PartitionSpec::Dirichlet(a) => partition_dirichlet(labels, cfg.clients, a, seed)?,
    })
}

struct Sinks {
    metrics: csv::Writer<File>,
    clients: csv::Writer<File>,
    cosine: csv::Writer<File>,
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    HarnessError::io(path, source)
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Writer<File>, HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(w)
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self, HarnessError> {
        Ok(Self {
            metrics: open_csv(&dir.join("metrics.csv"), &METRICS_HEADER)?,
            clients: open_csv(&dir.join("clients.csv"), &CLIENTS_HEADER)?,
            cosine: open_csv(&dir.join("cosine.csv"), &COSINE_HEADER)?,
        })
    }

    /// Append one round and flush, so a killed run leaves whole rows only.
    fn write(&mut self, dir: &Path, m: &RoundMetrics) -> Result<(), HarnessError> {
        let r = m.round.to_string();
        let err = |name: &str| {
            let p = dir.join(name);
            move |e: csv::Error| csv_err(&p, e)
        };
        for (k, l) in &m.per_client_losses {
            self.clients.write_record([r.clone(), k.to_string(), l.to_string()]).map_err(err("clients.csv"))?;
        }
        for s in &m.cosine {
            let mean = s.mean_cos.map(|c| c.to_string()).unwrap_or_default();
            self.cosine
                .write_record([r.clone(), s.layer.clone(), mean, s.pair_count.to_string(), s.excluded_pairs.to_string()])
                .map_err(err("cosine.csv"))?;
        }
        self.clients.flush().map_err(|e| HarnessError::io(dir.join("clients.csv"), e))?;
        self.cosine.flush().map_err(|e| HarnessError::io(dir.join("cosine.csv"), e))?;
        // the metrics row goes last: its presence means the round is complete
        self.metrics
            .write_record([
                r,
                m.test_acc.to_string(),
                m.test_loss.to_string(),
                m.train_loss_mean.to_string(),
                m.participants.len().to_string(),
            ])
            .map_err(err("metrics.csv"))?;
        self.metrics.flush().map_err(|e| HarnessError::io(dir.join("metrics.csv"), e))
    }
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn run_repeat(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> (Vec<RoundMetrics>, Option<HarnessError>) {
    let setup = || -> Result<_, HarnessError> {
        create_dir(dir)?;
        let (train, test) = load_data(cfg, seed)?;
        let shards = build_clients(cfg, &train, seed)?;
        let spec = cfg.model.spec(train.shape(), train.num_classes())?;
        let init = init_params(&spec, seed).map_err(|e| HarnessError::config(None, e.to_string()))?;
        let sinks = Sinks::open(dir)?;
        Ok((train, test, shards, spec, init, sinks))
    };
    let (train, test, shards, spec, init, mut sinks) = match setup() {
        Ok(s) => s,
        Err(e) => return (Vec::new(), Some(e)),
    };
    let ctx = RoundContext { spec: &spec, test: &test, eval_batch: cfg.eval_batch, cosine: cfg.cosine };
    let mut io_failure = None;
    let run = fedavg_run_with(&ctx, &train, &shards, &init, &cfg.fed_config(seed), |_, m| {
        sinks.write(dir, m).map_err(|e| {
            io_failure = Some(e);
            OptimError::Contract("metric output failed".into())
        })
    });
    let failure = io_failure.or_else(|| {
        run.failure.map(|e| match e {
            OptimError::Config(m) => HarnessError::config(None, m),
            other => HarnessError::Runtime(other.to_string()),
        })
    });
    (run.metrics, failure)
}

fn write_aggregate(path: &Path, histories: &[Vec<RoundMetrics>]) -> Result<(), HarnessError> {
    let mut w = open_csv(path, &AGGREGATE_HEADER)?;
    let rounds = histories.iter().map(Vec::len).min().unwrap_or(0);
    for r in 0..rounds {
        let stats = |f: fn(&RoundMetrics) -> f64| {
            let v: Vec<f64> = histories.iter().map(|h| f(&h[r])).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            [mean, min, max]
        };
        let mut row = vec![(r + 1).to_string()];
        for f in [|m: &RoundMetrics| m.test_acc, |m: &RoundMetrics| m.test_loss, |m: &RoundMetrics| m.train_loss_mean] {
            row.extend(stats(f).iter().map(f64::to_string));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Run every repeat of `cfg` into `opts.out_dir`: `seed_<s>/{metrics,clients,cosine}.csv`,
/// `aggregate.csv` over the rounds all repeats completed, and `manifest.json`.
/// A failed repeat is recorded in the manifest; the other repeats still run.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest, HarnessError> {
    cfg.validate()?;
    let threads = opts.threads.unwrap_or(cfg.threads);
    if threads == 0 {
        return Err(HarnessError::config(None, "threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Runtime(format!("thread pool: {e}")))?;
    create_dir(&opts.out_dir)?;
    let started = Instant::now();
    let mut histories = Vec::new();
    let mut repeats = Vec::new();
    for &s in &cfg.seeds {
        let seed = s.wrapping_add(opts.seed_offset);
        let rel = format!("seed_{seed}");
        let dir = opts.out_dir.join(&rel);
        let (history, failure) = pool.install(|| run_repeat(cfg, seed, &dir));
        if let Some(HarnessError::Config { .. }) = failure {
            return Err(failure.expect("matched"));
        }
        let files = ["metrics.csv", "clients.csv", "cosine.csv"]
            .iter()
            .map(|f| format!("{rel}/{f}"))
            .filter(|f| opts.out_dir.join(f).exists())
            .collect();
        repeats.push(RepeatRecord {
            seed,
            files,
            rounds_completed: history.len(),
            error_code: failure.as_ref().map(HarnessError::exit_code),
            error: failure.map(|e| e.to_string()),
        });
        histories.push(history);
    }
    write_aggregate(&opts.out_dir.join("aggregate.csv"), &histories)?;
    let manifest = RunManifest {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.render(),
        seed_offset: opts.seed_offset,
        threads,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        repeats,
        aggregate: "aggregate.csv".into(),
    };
    let path = opts.out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| HarnessError::io(&path, e))?;
    Ok(manifest)
}

/// Run every variant of a preset into `<out>/<label>`; toy presets go to [`run_toy`].
pub fn run_preset(p: &Preset, opts: &RunOptions) -> Result<Vec<RunManifest>, HarnessError> {
    match &p.kind {
        PresetKind::Toy(t) => {
            run_toy(*t, &opts.out_dir, opts.seed_offset)?;
            Ok(Vec::new())
        }
        PresetKind::Sweep(vs) => vs
            .iter()
            .map(|v| run_experiment(&v.config, &RunOptions { out_dir: opts.out_dir.join(&v.label), ..opts.clone() }))
            .collect(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn toy_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

/// Write a toy preset's trajectory CSVs into `out` and return a short summary.
pub fn run_toy(which: ToyPreset, out: &Path, seed: u64) -> Result<String, HarnessError> {
    create_dir(out)?;
    match which {
        ToyPreset::Paths => {
            let clients = toy::path_clients();
            let start = [2.5, 2.5];
            let mut summary = String::from("mode,final_x,final_y,final_loss\n");
            for (name, mode) in [("gd", DescentMode::Gd), ("sgd", DescentMode::Sgd), ("minibatch", DescentMode::Minibatch(2))]
            {
                let t = toy::trace_descent(&clients, mode, start, 0.1, 60, seed).map_err(toy_err)?;
                write_text(&out.join(format!("{name}.csv")), &t.to_csv())?;
                let [x, y] = t.last();
                summary.push_str(&format!("{name},{x},{y},{}\n", t.losses.last().expect("non-empty")));
            }
            write_text(&out.join("summary.csv"), &summary)?;
            Ok(summary)
        }
        ToyPreset::Drift => {
            let clients = toy::drift_pair();
            let star = toy::global_optimum(&clients).map_err(toy_err)?;
            let bar = toy::naive_parameter_average(&clients).map_err(toy_err)?;
            let objs = QuadObjective::for_clients(&clients);
            let mut summary = format!(
                "point,x,y\nglobal_optimum,{},{}\nparameter_average,{},{}\n",
                star[0], star[1], bar[0], bar[1]
            );
            for period in [1usize, 200] {
                let cfg = LocalSgdConfig { eta: 0.05, batch_size: 1, syncs: 1, sync_period: period, seed };
                let mut theta = toy::quad_params([0.0, 2.0]);
                let mut traj = toy::Trajectory { points: vec![[0.0, 2.0]], losses: vec![toy::mean_loss(&clients, [0.0, 2.0])] };
                for _ in 0..2000 / period {
                    theta = local_sgd(&objs, &theta, &cfg).map_err(toy_err)?.params;
                    let p = toy::params_to_vec2(&theta);
                    traj.points.push(p);
                    traj.losses.push(toy::mean_loss(&clients, p));
                }
                write_text(&out.join(format!("local_sgd_I{period}.csv")), &traj.to_csv())?;
                let [x, y] = traj.last();
                summary.push_str(&format!("local_sgd_I{period},{x},{y}\n"));
            }
            write_text(&out.join("summary.csv"), &summary)?;
            Ok(summary)
        }
    }
}
