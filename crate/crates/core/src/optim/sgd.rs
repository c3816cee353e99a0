use rayon::prelude::*;

use super::{DataClient, LocalObjective, OptimError};
use crate::data::{minibatch_positions, ClientShard, Dataset};
use crate::model::{self, Batch, ModelSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSgdConfig {
    pub eta: f64,
    pub batch_size: usize,
    /// Number of synchronizations (outer iterations).
    pub syncs: usize,
    /// Local steps between synchronizations.
    pub sync_period: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdRun {
    pub params: ParamVector,
    /// Mean mini-batch loss of each epoch (or synchronization period).
    pub epoch_losses: Vec<f64>,
}

/// Result of training one client from a starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTraining {
    pub params: ParamVector,
    pub batch_losses: Vec<f64>,
}

impl LocalTraining {
    pub fn mean_loss(&self) -> f64 {
        mean(&self.batch_losses)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_hparams(eta: f64, batch_size: usize) -> Result<(), OptimError> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(OptimError::Config(format!("learning rate must be positive, got {eta}")));
    }
    if batch_size == 0 {
        return Err(OptimError::Config("batch size must be at least 1".into()));
    }
    Ok(())
}

/// `theta - eta * grad` on the given positions, refusing to leave finite territory.
fn step<O: LocalObjective + ?Sized>(
    obj: &O,
    theta: &mut ParamVector,
    positions: &[usize],
    eta: f64,
    at: impl FnOnce() -> String,
) -> Result<f64, OptimError> {
    let (loss, grad) = obj.loss_and_grad(theta, positions)?;
    let mut next = theta.clone();
    next.axpy(-eta, &grad);
    if !loss.is_finite() || !next.is_finite() {
        return Err(OptimError::Diverged { at: at(), last_finite: Box::new(theta.clone()) });
    }
    *theta = next;
    Ok(loss)
}

/// Walks a client's batch schedule across epoch boundaries.
struct BatchCursor {
    client_id: usize,
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Vec<usize>>,
    next: usize,
}

impl BatchCursor {
    fn new<O: LocalObjective + ?Sized>(obj: &O, batch_size: usize, seed: u64, first_epoch: u64) -> Result<Self, OptimError> {
        let batches = minibatch_positions(obj.num_samples(), batch_size, seed, obj.client_id(), first_epoch)?;
        Ok(Self { client_id: obj.client_id(), len: obj.num_samples(), batch_size, seed, epoch: first_epoch, batches, next: 0 })
    }

    fn next_batch(&mut self) -> Result<&[usize], OptimError> {
        if self.next == self.batches.len() {
            self.epoch += 1;
            self.batches = minibatch_positions(self.len, self.batch_size, self.seed, self.client_id, self.epoch)?;
            self.next = 0;
        }
        self.next += 1;
        Ok(&self.batches[self.next - 1])
    }
}

/// Mini-batch SGD over `epochs` passes of the client's data, starting at
/// stream epoch `first_epoch`.
pub fn local_train<O: LocalObjective + ?Sized>(
    obj: &O,
    start: &ParamVector,
    eta: f64,
    batch_size: usize,
    first_epoch: u64,
    epochs: usize,
    seed: u64,
) -> Result<LocalTraining, OptimError> {
    check_hparams(eta, batch_size)?;
    let mut theta = start.clone();
    let mut batch_losses = Vec::new();
    for e in 0..epochs as u64 {
        let epoch = first_epoch + e;
        let batches = minibatch_positions(obj.num_samples(), batch_size, seed, obj.client_id(), epoch)?;
        for (b, positions) in batches.iter().enumerate() {
            let loss = step(obj, &mut theta, positions, eta, || {
                format!("client {} epoch {epoch} batch {b}", obj.client_id())
            })?;
            batch_losses.push(loss);
        }
    }
    Ok(LocalTraining { params: theta, batch_losses })
}

/// Mini-batch SGD; a batch size of at least the data size is full-batch GD.
pub fn sgd<O: LocalObjective + ?Sized>(obj: &O, init: &ParamVector, cfg: &SgdConfig) -> Result<SgdRun, OptimError> {
    let mut params = init.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs as u64 {
        let run = local_train(obj, &params, cfg.eta, cfg.batch_size, e, 1, cfg.seed)?;
        epoch_losses.push(run.mean_loss());
        params = run.params;
    }
    Ok(SgdRun { params, epoch_losses })
}

/// [`sgd`] on a whole dataset (client id 0).
pub fn sgd_run(spec: &ModelSpec, data: &Dataset, init: &ParamVector, cfg: &SgdConfig) -> Result<SgdRun, OptimError> {
    let shard = ClientShard::whole(0, data.len());
    sgd(&DataClient::new(spec, data, &shard), init, cfg)
}

/// One plain gradient step on a batch.
pub fn sgd_step(spec: &ModelSpec, theta: &ParamVector, batch: &Batch, eta: f64) -> Result<ParamVector, OptimError> {
    let g = model::grad(spec, theta, batch)?;
    let mut next = theta.clone();
    next.axpy(-eta, &g);
    Ok(next)
}

/// One parallel-SGD step: unweighted mean of per-device gradients.
pub fn parallel_sgd_step(
    spec: &ModelSpec,
    theta: &ParamVector,
    batches: &[Batch],
    eta: f64,
) -> Result<ParamVector, OptimError> {
    if batches.is_empty() {
        return Err(OptimError::Contract("parallel step needs at least one device".into()));
    }
    let grads = batches.iter().map(|b| model::grad(spec, theta, b)).collect::<Result<Vec<_>, _>>()?;
    let g = mean_of(grads);
    let mut next = theta.clone();
    next.axpy(-eta, &g);
    Ok(next)
}

/// Sum in the given order, then divide by the count.
fn mean_of(mut vs: Vec<ParamVector>) -> ParamVector {
    let k = vs.len() as f64;
    let rest = vs.split_off(1);
    let mut acc = vs.pop().expect("at least one vector");
    for v in &rest {
        acc.axpy(1.0, v);
    }
    for x in acc.values_mut() {
        *x /= k;
    }
    acc
}

fn ordered<O: LocalObjective>(devices: &[O]) -> Result<Vec<&O>, OptimError> {
    if devices.is_empty() {
        return Err(OptimError::Contract("need at least one device".into()));
    }
    let mut refs: Vec<&O> = devices.iter().collect();
    refs.sort_by_key(|d| d.client_id());
    Ok(refs)
}

/// Parallel SGD: every step each device draws its next mini-batch, the server
/// averages the gradients (unweighted) and takes one step. An epoch is
/// `ceil(max_k |D_k| / B)` steps; devices with fewer batches roll over into
/// their next shuffled pass. Reduction order is ascending client id.
pub fn parallel_sgd<O: LocalObjective>(devices: &[O], init: &ParamVector, cfg: &SgdConfig) -> Result<SgdRun, OptimError> {
    check_hparams(cfg.eta, cfg.batch_size)?;
    let devices = ordered(devices)?;
    let mut cursors =
        devices.iter().map(|d| BatchCursor::new(*d, cfg.batch_size, cfg.seed, 0)).collect::<Result<Vec<_>, _>>()?;
    let steps = devices.iter().map(|d| d.num_samples().div_ceil(cfg.batch_size)).max().unwrap_or(0);

    let mut theta = init.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::with_capacity(steps);
        for s in 0..steps {
            let outs: Vec<Result<(f64, ParamVector), OptimError>> = devices
                .par_iter()
                .zip(cursors.par_iter_mut())
                .map(|(d, c)| {
                    let positions = c.next_batch()?.to_vec();
                    d.loss_and_grad(&theta, &positions)
                })
                .collect();
            let (ls, gs): (Vec<f64>, Vec<ParamVector>) = outs.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip();
            let g = mean_of(gs);
            let mut next = theta.clone();
            next.axpy(-cfg.eta, &g);
            let loss = mean(&ls);
            if !loss.is_finite() || !next.is_finite() {
                return Err(OptimError::Diverged { at: format!("epoch {epoch} step {s}"), last_finite: Box::new(theta) });
            }
            theta = next;
            losses.push(loss);
        }
        epoch_losses.push(mean(&losses));
    }
    Ok(SgdRun { params: theta, epoch_losses })
}

pub fn parallel_sgd_run(
    spec: &ModelSpec,
    data: &Dataset,
    shards: &[ClientShard],
    init: &ParamVector,
    cfg: &SgdConfig,
) -> Result<SgdRun, OptimError> {
    parallel_sgd(&DataClient::for_shards(spec, data, shards), init, cfg)
}

/// Local SGD: every synchronization, each device copies the shared
/// parameters, takes `sync_period` local steps on its own batch stream, and
/// the parameters are averaged (unweighted, ascending client id).
pub fn local_sgd<O: LocalObjective>(devices: &[O], init: &ParamVector, cfg: &LocalSgdConfig) -> Result<SgdRun, OptimError> {
    check_hparams(cfg.eta, cfg.batch_size)?;
    if cfg.sync_period == 0 {
        return Err(OptimError::Config("synchronization period must be at least 1".into()));
    }
    let devices = ordered(devices)?;
    let mut cursors =
        devices.iter().map(|d| BatchCursor::new(*d, cfg.batch_size, cfg.seed, 0)).collect::<Result<Vec<_>, _>>()?;
    let mut theta = init.clone();
    let mut sync_losses = Vec::with_capacity(cfg.syncs);
    for n in 0..cfg.syncs {
        let outs: Vec<Result<LocalTraining, OptimError>> = devices
            .par_iter()
            .zip(cursors.par_iter_mut())
            .map(|(d, c)| {
                let mut local = theta.clone();
                let mut batch_losses = Vec::with_capacity(cfg.sync_period);
                for t in 0..cfg.sync_period {
                    let positions = c.next_batch()?.to_vec();
                    let loss = step(*d, &mut local, &positions, cfg.eta, || {
                        format!("sync {n} device {} local step {t}", d.client_id())
                    })?;
                    batch_losses.push(loss);
                }
                Ok(LocalTraining { params: local, batch_losses })
            })
            .collect();
        let outs = outs.into_iter().collect::<Result<Vec<_>, _>>()?;
        let losses: Vec<f64> = outs.iter().flat_map(|o| o.batch_losses.iter().copied()).collect();
        sync_losses.push(mean(&losses));
        theta = mean_of(outs.into_iter().map(|o| o.params).collect());
    }
    Ok(SgdRun { params: theta, epoch_losses: sync_losses })
}

pub fn local_sgd_run(
    spec: &ModelSpec,
    data: &Dataset,
    shards: &[ClientShard],
    init: &ParamVector,
    cfg: &LocalSgdConfig,
) -> Result<SgdRun, OptimError> {
    local_sgd(&DataClient::for_shards(spec, data, shards), init, cfg)
}
