use num_rational::Ratio;

use super::config::{DatasetSpec, ExperimentConfig, ModelChoice, PartitionSpec};
use super::HarnessError;
use crate::optim::{decimal_ratio, effective_update_amount_exact, AggMode, UpdateOption};

/// Preset names, in catalog order.
pub const CATALOG: [&str; 12] = [
    "base",
    "fig2_cl_to_fl",
    "fig3_matched_u",
    "fig4_hparams_iid",
    "fig5_pp_iid",
    "fig7_imbalance",
    "fig9_dirichlet",
    "fig9_pp_noniid",
    "fig10_traces",
    "fig11_cosine",
    "toy_fig1",
    "toy_fig8",
];

/// Desk scale: synthetic blobs and a narrow MLP. Local work per round is
/// heavier than the full-scale base so that label skew visibly hurts within
/// [`DESK_ROUNDS`] rounds; see the README for the tuning notes.
pub const DESK_ETA: f64 = 0.05;
pub const DESK_ROUNDS: usize = 50;
pub const DESK_SPREAD: f64 = 0.35;
pub const DESK_HIDDEN: usize = 8;
pub const DESK_EPOCHS: usize = 5;
pub const DESK_BATCH: usize = 10;
pub const FULL_ROUNDS: usize = 100;
pub const FULL_ETA: f64 = 0.005;

/// One configuration of a sweep; it writes into the sub-directory `label`.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyPreset {
    /// GD, SGD and mini-batch paths on a four-client quadratic landscape.
    Paths,
    /// Two clients with different optima: local SGD with short and long
    /// synchronization periods against the closed-form optimum.
    Drift,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PresetKind {
    Sweep(Vec<Variant>),
    Toy(ToyPreset),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub desk: bool,
    pub kind: PresetKind,
}

impl Preset {
    pub fn variants(&self) -> &[Variant] {
        match &self.kind {
            PresetKind::Sweep(v) => v,
            PresetKind::Toy(_) => &[],
        }
    }

    /// All variants as one text: each rendered config under a
    /// `# variant: <label>` line.
    pub fn render(&self) -> String {
        match &self.kind {
            PresetKind::Toy(_) => format!("# {}: {}\n", self.name, self.summary),
            PresetKind::Sweep(vs) => {
                let mut s = format!("# {}: {}\n", self.name, self.summary);
                for v in vs {
                    s.push_str(&format!("\n# variant: {}\n{}", v.label, v.config.render()));
                }
                s
            }
        }
    }
}

fn base(name: &str, desk: bool) -> ExperimentConfig {
    let (dataset, model, eta_l, rounds, local_epochs, batch_size) = if desk {
        let model = ModelChoice::Mlp(vec![DESK_HIDDEN]);
        (DatasetSpec::SYNTH_DEFAULT, model, DESK_ETA, DESK_ROUNDS, DESK_EPOCHS, DESK_BATCH)
    } else {
        let ds = DatasetSpec::Cifar10 { path: "data/cifar-10-batches-bin".into() };
        (ds, ModelChoice::Cnn, FULL_ETA, FULL_ROUNDS, 1, 50)
    };
    ExperimentConfig {
        name: name.to_string(),
        dataset,
        model,
        partition: PartitionSpec::Iid,
        clients: 10,
        local_epochs,
        batch_size,
        eta_l,
        rounds,
        eta_g: 1.0,
        client_frac: 1.0,
        agg: AggMode::Weighted,
        option: UpdateOption::Delta,
        seeds: vec![0],
        eval_batch: 1000,
        cosine: true,
        threads: 1,
        out: None,
    }
}

fn variant(label: impl Into<String>, base: &ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig)) -> Variant {
    let mut config = base.clone();
    edit(&mut config);
    Variant { label: label.into(), config }
}

fn train_size(cfg: &ExperimentConfig) -> usize {
    match cfg.dataset {
        DatasetSpec::Cifar10 { .. } => 50_000,
        DatasetSpec::Synth { n, .. } => n,
    }
}

/// Effective update amount of a configuration, exactly.
pub fn config_update_amount(cfg: &ExperimentConfig) -> Result<Ratio<i128>, HarnessError> {
    let eta = decimal_ratio(cfg.eta_l)
        .ok_or_else(|| HarnessError::config(None, format!("eta_l {} has no exact decimal form", cfg.eta_l)))?;
    Ok(effective_update_amount_exact(eta, cfg.local_epochs, train_size(cfg), cfg.batch_size, cfg.clients))
}

fn check_matched(variants: &[Variant]) -> Result<(), HarnessError> {
    let first = config_update_amount(&variants[0].config)?;
    for v in &variants[1..] {
        let u = config_update_amount(&v.config)?;
        if u != first {
            return Err(HarnessError::config(None, format!("variant {} has u = {u}, expected {first}", v.label)));
        }
    }
    Ok(())
}

fn sweep<T: Copy + ToString>(
    out: &mut Vec<Variant>,
    base: &ExperimentConfig,
    key: &str,
    values: &[T],
    set: impl Fn(&mut ExperimentConfig, T),
) {
    for &v in values {
        out.push(variant(format!("{key}_{}", v.to_string()), base, |c| set(c, v)));
    }
}

/// Look up a preset; `desk` substitutes synthetic blobs, an MLP and
/// [`DESK_ROUNDS`] rounds for CIFAR-10 and the CNN.
pub fn preset(name: &str, desk: bool) -> Result<Preset, HarnessError> {
    let b = base(name, desk);
    let eta = b.eta_l;
    let (summary, kind) = match name {
        "base" => ("base setting: K=10, E=1, B=50, weighted, IID", PresetKind::Sweep(vec![variant("base", &b, |_| {})])),
        "fig2_cl_to_fl" => {
            let mut v = Vec::new();
            sweep(&mut v, &b, "K", &[1, 10, 50], |c, k| c.clients = k);
            ("growing K with fixed hyperparameters", PresetKind::Sweep(v))
        }
        "fig3_matched_u" => {
            let set = |k: usize, e: usize, bs: usize, eta_l: f64| {
                move |c: &mut ExperimentConfig| {
                    c.clients = k;
                    c.local_epochs = e;
                    c.batch_size = bs;
                    c.eta_l = eta_l;
                }
            };
            let v = vec![
                variant("cl_K_1_B_500", &b, set(1, 1, 500, eta)),
                variant("K_10_B_50", &b, set(10, 1, 50, eta)),
                variant("K_10_B_100_E_2", &b, set(10, 2, 100, eta)),
                variant("K_10_B_25_half_eta", &b, set(10, 1, 25, eta / 2.0)),
                variant("K_50_B_10", &b, set(50, 1, 10, eta)),
            ];
            check_matched(&v)?;
            ("CL and FL configurations with equal effective update amount", PresetKind::Sweep(v))
        }
        "fig4_hparams_iid" => {
            let mut v = Vec::new();
            sweep(&mut v, &b, "E", &[1, 5, 10, 20], |c, e| c.local_epochs = e);
            sweep(&mut v, &b, "B", &[5, 10, 25, 50, 100], |c, x| c.batch_size = x);
            sweep(&mut v, &b, "eta", &[eta / 5.0, eta / 2.0, eta, eta * 2.0], |c, x| c.eta_l = x);
            ("one-at-a-time sweeps of E, B and eta under IID data", PresetKind::Sweep(v))
        }
        "fig5_pp_iid" => {
            let mut v = Vec::new();
            sweep(&mut v, &b, "C", &[0.1, 0.2, 0.5, 1.0], |c, x| c.client_frac = x);
            ("1, 2, 5 or 10 of 10 clients per round, IID", PresetKind::Sweep(v))
        }
        "fig7_imbalance" => {
            let mut v = Vec::new();
            for (agg, tag) in [(AggMode::Weighted, "weighted"), (AggMode::Naive, "naive")] {
                for s in [0.0, 0.3, 0.6, 0.9] {
                    v.push(variant(format!("{tag}_sgm_{s}"), &b, |c| {
                        c.agg = agg;
                        c.partition = PartitionSpec::Sgm(s);
                    }));
                }
            }
            ("shard-size imbalance under weighted and naive aggregation", PresetKind::Sweep(v))
        }
        "fig9_dirichlet" => {
            let b = ExperimentConfig { seeds: vec![0, 1, 2], ..b };
            let mut v = vec![variant("iid", &b, |_| {})];
            sweep(&mut v, &b, "alpha", &[0.1, 0.5, 1.0, 10.0], |c, a| c.partition = PartitionSpec::Dirichlet(a));
            ("Dirichlet label skew, three repeats each", PresetKind::Sweep(v))
        }
        "fig9_pp_noniid" => {
            let b = ExperimentConfig { seeds: vec![0, 1, 2], partition: PartitionSpec::Dirichlet(0.1), ..b };
            let mut v = Vec::new();
            sweep(&mut v, &b, "C", &[0.1, 0.2, 0.5, 1.0], |c, x| c.client_frac = x);
            ("partial participation under Dirichlet alpha=0.1, three repeats each", PresetKind::Sweep(v))
        }
        "fig10_traces" | "fig11_cosine" => {
            let v = vec![
                variant("iid", &b, |_| {}),
                variant("alpha_0.1", &b, |c| c.partition = PartitionSpec::Dirichlet(0.1)),
            ];
            let summary = if name == "fig10_traces" {
                "per-client training loss, IID against Dirichlet alpha=0.1"
            } else {
                "layer-wise cosine similarity of client updates, IID against Dirichlet alpha=0.1"
            };
            (summary, PresetKind::Sweep(v))
        }
        "toy_fig1" => ("GD, SGD and mini-batch paths on a quadratic landscape", PresetKind::Toy(ToyPreset::Paths)),
        "toy_fig8" => ("two-client drift on quadratics", PresetKind::Toy(ToyPreset::Drift)),
        _ => {
            return Err(HarnessError::config(None, format!("unknown preset {name:?}; available: {}", CATALOG.join(", "))))
        }
    };
    let name = CATALOG.iter().copied().find(|n| *n == name).expect("matched above");
    Ok(Preset { name, summary, desk, kind })
}
