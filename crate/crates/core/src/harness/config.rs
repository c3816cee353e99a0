use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::presets::{DESK_HIDDEN, DESK_SPREAD};
use super::HarnessError;
use crate::model::{InputShape, ModelSpec};
use crate::optim::{AggMode, FedConfig, UpdateOption};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10 { path: PathBuf },
    Synth { n: usize, n_test: usize, classes: usize, dim: usize, spread: f64 },
}

impl DatasetSpec {
    pub const SYNTH_DEFAULT: DatasetSpec =
        DatasetSpec::Synth { n: 2000, n_test: 1000, classes: 10, dim: 32, spread: DESK_SPREAD };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelChoice {
    Logistic,
    Mlp(Vec<usize>),
    Cnn,
}

impl ModelChoice {
    pub fn spec(&self, shape: InputShape, classes: usize) -> Result<ModelSpec, HarnessError> {
        let spec = match (self, shape) {
            (ModelChoice::Logistic, s) => ModelSpec::logistic(s.len(), classes),
            (ModelChoice::Mlp(h), s) => ModelSpec::mlp(s.len(), h.clone(), classes),
            (ModelChoice::Cnn, InputShape::Image { channels, height, width }) => {
                ModelSpec::paper_cnn(channels, height, width, classes)
            }
            (ModelChoice::Cnn, InputShape::Flat(_)) => {
                return Err(HarnessError::config(None, "model=cnn needs an image dataset"));
            }
        };
        spec.validate().map_err(|e| HarnessError::config(None, e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionSpec {
    Iid,
    Sgm(f64),
    Dirichlet(f64),
}

/// Everything one experiment needs. `seeds` has one entry per repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub model: ModelChoice,
    pub partition: PartitionSpec,
    pub clients: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta_l: f64,
    pub rounds: usize,
    pub eta_g: f64,
    pub client_frac: f64,
    pub agg: AggMode,
    pub option: UpdateOption,
    pub seeds: Vec<u64>,
    pub eval_batch: usize,
    pub cosine: bool,
    pub threads: usize,
    pub out: Option<PathBuf>,
}

pub const REQUIRED_KEYS: [&str; 9] = ["dataset", "model", "partition", "K", "E", "B", "eta_l", "R", "seeds"];

impl ExperimentConfig {
    /// The FedAvg settings of the repeat with the given seed.
    pub fn fed_config(&self, seed: u64) -> FedConfig {
        FedConfig {
            eta_g: self.eta_g,
            eta_l: self.eta_l,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            clients: self.clients,
            rounds: self.rounds,
            client_frac: self.client_frac,
            sync_period: 1,
            agg: self.agg,
            option: self.option,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::config(None, m));
        self.fed_config(0).validate().map_err(|e| HarnessError::config(None, e.to_string()))?;
        if self.seeds.is_empty() {
            return err("seeds must list at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return err("seeds must be distinct".into());
        }
        if self.eval_batch == 0 {
            return err("eval_batch must be at least 1".into());
        }
        if self.threads == 0 {
            return err("threads must be at least 1".into());
        }
        if !plain_text(&self.name) {
            return err(format!("name {:?} must be non-empty without '#', '=' or line breaks", self.name));
        }
        for p in [self.out.as_ref(), self.data_path()].into_iter().flatten() {
            if !plain_text(&p.to_string_lossy()) {
                return err(format!("path {p:?} must be non-empty without '#', '=' or line breaks"));
            }
        }
        match self.partition {
            PartitionSpec::Sgm(s) if !(s >= 0.0 && s.is_finite()) => return err(format!("sgm must be >= 0, got {s}")),
            PartitionSpec::Dirichlet(a) if !(a > 0.0 && a.is_finite()) => {
                return err(format!("alpha must be > 0, got {a}"))
            }
            _ => {}
        }
        if let DatasetSpec::Synth { n, n_test, classes, dim, spread } = self.dataset {
            if classes < 2 || dim == 0 || n < classes || n_test < classes || !(spread >= 0.0 && spread.is_finite()) {
                return err("synthetic data needs classes >= 2, dim >= 1, n and n_test >= classes, spread >= 0".into());
            }
        }
        if let ModelChoice::Mlp(h) = &self.model {
            if h.contains(&0) {
                return err("hidden layer sizes must be positive".into());
            }
        }
        Ok(())
    }

    fn data_path(&self) -> Option<&PathBuf> {
        match &self.dataset {
            DatasetSpec::Cifar10 { path } => Some(path),
            DatasetSpec::Synth { .. } => None,
        }
    }

    /// Canonical `key=value` text; [`parse_config`] reads it back unchanged.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("writing to a String");
        kv("name", self.name.clone());
        match &self.dataset {
            DatasetSpec::Cifar10 { path } => {
                kv("dataset", "cifar10".into());
                kv("data_path", path.to_string_lossy().into_owned());
            }
            DatasetSpec::Synth { n, n_test, classes, dim, spread } => {
                kv("dataset", "synth".into());
                kv("synth_n", n.to_string());
                kv("synth_test", n_test.to_string());
                kv("synth_classes", classes.to_string());
                kv("synth_dim", dim.to_string());
                kv("synth_spread", spread.to_string());
            }
        }
        match &self.model {
            ModelChoice::Logistic => kv("model", "logistic".into()),
            ModelChoice::Cnn => kv("model", "cnn".into()),
            ModelChoice::Mlp(h) => {
                kv("model", "mlp".into());
                kv("hidden", join(h));
            }
        }
        match self.partition {
            PartitionSpec::Iid => kv("partition", "iid".into()),
            PartitionSpec::Sgm(s) => {
                kv("partition", "sgm".into());
                kv("sgm", s.to_string());
            }
            PartitionSpec::Dirichlet(a) => {
                kv("partition", "dirichlet".into());
                kv("alpha", a.to_string());
            }
        }
        kv("K", self.clients.to_string());
        kv("E", self.local_epochs.to_string());
        kv("B", self.batch_size.to_string());
        kv("eta_l", self.eta_l.to_string());
        kv("R", self.rounds.to_string());
        kv("eta_g", self.eta_g.to_string());
        kv("C", self.client_frac.to_string());
        kv("agg", match self.agg {
            AggMode::Weighted => "weighted".into(),
            AggMode::Naive => "naive".into(),
        });
        kv("option", match self.option {
            UpdateOption::Delta => "I".into(),
            UpdateOption::Params => "II".into(),
        });
        kv("seeds", join(&self.seeds));
        kv("eval_batch", self.eval_batch.to_string());
        kv("cosine", self.cosine.to_string());
        kv("threads", self.threads.to_string());
        if let Some(out) = &self.out {
            kv("out", out.to_string_lossy().into_owned());
        }
        s
    }
}

fn plain_text(s: &str) -> bool {
    !s.is_empty() && s.trim() == s && !s.contains(['#', '=', '\n', '\r'])
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

struct Table {
    entries: BTreeMap<String, Entry>,
}

impl Table {
    fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(HarnessError::config(Some(line), format!("expected key=value, got {content:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(HarnessError::config(Some(line), "empty key"));
            }
            if let Some(prev) = entries.insert(k.to_string(), Entry { line, value: v.to_string(), used: false }) {
                return Err(HarnessError::config(Some(line), format!("key {k} already set on line {}", prev.line)));
            }
        }
        Ok(Self { entries })
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.get_mut(key).map(|e| {
            e.used = true;
            (e.line, e.value.clone())
        })
    }

    fn get<T: FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>, HarnessError> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| HarnessError::config(Some(line), format!("{key}: expected {what}, got {v:?}"))),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, what: &str, default: T) -> Result<T, HarnessError> {
        Ok(self.get(key, what)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&mut self, key: &str, what: &str) -> Result<Option<Vec<T>>, HarnessError> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| HarnessError::config(Some(line), format!("{key}: expected a comma list of {what}, got {v:?}"))),
        }
    }

    fn choice(&mut self, key: &str, options: &[&str]) -> Result<Option<(usize, String)>, HarnessError> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) if options.contains(&v.as_str()) => Ok(Some((line, v))),
            Some((line, v)) => {
                Err(HarnessError::config(Some(line), format!("{key}: expected one of {}, got {v:?}", options.join("|"))))
            }
        }
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|e| e.line)
    }

    /// The first key nobody asked for, in file order.
    fn leftover(&self) -> Option<(&str, usize)> {
        self.entries.iter().filter(|(_, e)| !e.used).map(|(k, e)| (k.as_str(), e.line)).min_by_key(|(_, l)| *l)
    }
}

/// Parse flat `key=value` text (`#` starts a comment). Unknown keys, keys
/// that do not apply to the chosen dataset, model or partition, bad values
/// and duplicates are errors naming the line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut t = Table::parse(text)?;
    let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| t.line_of(k).is_none()).collect();
    if !missing.is_empty() {
        return Err(HarnessError::config(None, format!("missing required keys: {}", missing.join(", "))));
    }

    let name = t.or("name", "text", "experiment".to_string())?;
    let (_, dataset) = t.choice("dataset", &["cifar10", "synth"])?.expect("required");
    let dataset = if dataset == "cifar10" {
        let path = t.or("data_path", "a path", "data/cifar-10-batches-bin".to_string())?;
        DatasetSpec::Cifar10 { path: PathBuf::from(path) }
    } else {
        let DatasetSpec::Synth { n, n_test, classes, dim, spread } = DatasetSpec::SYNTH_DEFAULT else { unreachable!() };
        DatasetSpec::Synth {
            n: t.or("synth_n", "an integer", n)?,
            n_test: t.or("synth_test", "an integer", n_test)?,
            classes: t.or("synth_classes", "an integer", classes)?,
            dim: t.or("synth_dim", "an integer", dim)?,
            spread: t.or("synth_spread", "a number", spread)?,
        }
    };

    let (_, model) = t.choice("model", &["logistic", "mlp", "cnn"])?.expect("required");
    let model = match model.as_str() {
        "logistic" => ModelChoice::Logistic,
        "cnn" => ModelChoice::Cnn,
        _ => ModelChoice::Mlp(t.list("hidden", "integers")?.unwrap_or_else(|| vec![DESK_HIDDEN])),
    };

    let (pline, partition) = t.choice("partition", &["iid", "sgm", "dirichlet"])?.expect("required");
    let need = |t: &mut Table, key: &str| -> Result<f64, HarnessError> {
        t.get(key, "a number")?
            .ok_or_else(|| HarnessError::config(Some(pline), format!("partition={partition} requires {key}")))
    };
    let partition = match partition.as_str() {
        "iid" => PartitionSpec::Iid,
        "sgm" => PartitionSpec::Sgm(need(&mut t, "sgm")?),
        _ => PartitionSpec::Dirichlet(need(&mut t, "alpha")?),
    };

    let clients = t.get("K", "an integer")?.expect("required");
    let local_epochs = t.get("E", "an integer")?.expect("required");
    let batch_size = t.get("B", "an integer")?.expect("required");
    let eta_l = t.get("eta_l", "a number")?.expect("required");
    let rounds = t.get("R", "an integer")?.expect("required");
    let eta_g = t.or("eta_g", "a number", 1.0)?;
    let client_frac = t.or("C", "a number", 1.0)?;
    let agg = match t.choice("agg", &["weighted", "naive"])? {
        Some((_, v)) if v == "naive" => AggMode::Naive,
        _ => AggMode::Weighted,
    };
    let option = match t.choice("option", &["I", "II"])? {
        Some((_, v)) if v == "II" => UpdateOption::Params,
        _ => UpdateOption::Delta,
    };
    let seeds: Vec<u64> = t.list("seeds", "integers")?.expect("required");
    if let Some(repeats) = t.get::<usize>("repeats", "an integer")? {
        if repeats != seeds.len() {
            let line = t.line_of("repeats");
            return Err(HarnessError::config(line, format!("repeats={repeats} but {} seeds listed", seeds.len())));
        }
    }
    let eval_batch = t.or("eval_batch", "an integer", 1000)?;
    let cosine = t.or("cosine", "true or false", true)?;
    let threads = t.or("threads", "an integer", 1)?;
    let out = t.get::<String>("out", "a path")?.map(PathBuf::from);

    if let Some((key, line)) = t.leftover() {
        return Err(HarnessError::config(Some(line), format!("unknown key {key} for this dataset, model and partition")));
    }
    let cfg = ExperimentConfig {
        name,
        dataset,
        model,
        partition,
        clients,
        local_epochs,
        batch_size,
        eta_l,
        rounds,
        eta_g,
        client_frac,
        agg,
        option,
        seeds,
        eval_batch,
        cosine,
        threads,
        out,
    };
    cfg.validate()?;
    Ok(cfg)
}
