//! The optimization ladder: mini-batch SGD, parallel SGD, local SGD and
//! FedAvg, all driven by the same local-step machinery so that the
//! degenerate configurations reduce to one another exactly.
//!
//! Algorithms are written against [`LocalObjective`], a client that can
//! report a mean loss and gradient over some of its samples. [`DataClient`]
//! binds a model, a dataset and a shard; the quadratic sandbox in
//! [`crate::toy`] provides another implementation.
//!
//! Batch streams are keyed by `(seed, client_id, epoch)` where `epoch` counts
//! the client's local passes over its shard since the start of the run. In
//! FedAvg round `r` (0-based) local epoch `e` is pass `r * E + e`, so a
//! client's stream never depends on which other clients were sampled.

mod aggregate;
mod effective;
mod fedavg;
mod sgd;

use thiserror::Error;

use crate::data::{ClientShard, DataError, Dataset};
use crate::diagnostics::DiagError;
use crate::model::{self, ModelError, ModelSpec, ParamVector};

pub use aggregate::{aggregate, aggregation_weights};
pub use effective::{decimal_ratio, effective_update_amount, effective_update_amount_exact};
pub use fedavg::{
    fedavg_round, fedavg_run, fedavg_run_with, participant_count, select_participants, FedRun, RoundContext,
};
pub use sgd::{
    local_sgd, local_sgd_run, local_train, parallel_sgd, parallel_sgd_run, parallel_sgd_step, sgd, sgd_run, sgd_step,
    LocalSgdConfig, LocalTraining, SgdConfig, SgdRun,
};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at {at}")]
    Diverged { at: String, last_finite: Box<ParamVector> },
    #[error("client {client_id} diverged in round {round}")]
    ClientDiverged { client_id: usize, round: usize, last_finite: Box<ParamVector> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diagnostics(#[from] DiagError),
}

/// How client payloads are weighted by the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMode {
    /// `|D_k| / M` over the round's participants.
    Weighted,
    /// `1 / |S|`.
    Naive,
}

/// What clients send back to the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOption {
    /// Option I: the update `theta_k - theta`, applied with the global rate.
    Delta,
    /// Option II: the trained parameters `theta_k`.
    Params,
}

/// FedAvg hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub eta_g: f64,
    pub eta_l: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub clients: usize,
    pub rounds: usize,
    /// Client sampling ratio C in (0, 1].
    pub client_frac: f64,
    /// Synchronization period, only used by local SGD.
    pub sync_period: usize,
    pub agg: AggMode,
    pub option: UpdateOption,
    pub seed: u64,
}

impl FedConfig {
    /// Base setting: K = 10, E = 1, B = 50, eta = 0.005, full participation.
    pub fn base() -> Self {
        Self {
            eta_g: 1.0,
            eta_l: 0.005,
            batch_size: 50,
            local_epochs: 1,
            clients: 10,
            rounds: 100,
            client_frac: 1.0,
            sync_period: 1,
            agg: AggMode::Weighted,
            option: UpdateOption::Delta,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Config(m.to_string()));
        if !(self.eta_g > 0.0 && self.eta_g.is_finite()) {
            return bad("eta_g must be positive");
        }
        if !(self.eta_l > 0.0 && self.eta_l.is_finite()) {
            return bad("eta_l must be positive");
        }
        if self.batch_size == 0 || self.local_epochs == 0 || self.clients == 0 || self.rounds == 0 || self.sync_period == 0
        {
            return bad("B, E, K, R and I must all be at least 1");
        }
        if !(self.client_frac > 0.0 && self.client_frac <= 1.0) {
            return bad("client sampling ratio must lie in (0, 1]");
        }
        Ok(())
    }
}

/// A client's contribution to one FedAvg round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub option: UpdateOption,
    /// `theta_k - theta` for [`UpdateOption::Delta`], `theta_k` otherwise.
    pub payload: ParamVector,
    pub n_samples: usize,
    /// Mean of the mini-batch losses seen during the round.
    pub train_loss: f64,
}

impl ClientUpdate {
    /// The update `theta_k - theta` whatever the payload kind.
    pub fn delta(&self, global: &ParamVector) -> ParamVector {
        match self.option {
            UpdateOption::Delta => self.payload.clone(),
            UpdateOption::Params => self.payload.sub(global),
        }
    }
}

/// Outcome of one FedAvg round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    /// 0-based round index.
    pub round: usize,
    pub global: ParamVector,
    /// Ascending client ids.
    pub participants: Vec<usize>,
    /// Ascending by client id.
    pub updates: Vec<ClientUpdate>,
}

/// A client able to evaluate its mean loss and gradient over a subset of its
/// samples, addressed by position `0..num_samples()`.
pub trait LocalObjective: Sync {
    fn client_id(&self) -> usize;
    fn num_samples(&self) -> usize;
    fn loss_and_grad(&self, params: &ParamVector, positions: &[usize]) -> Result<(f64, ParamVector), OptimError>;
}

/// Model + dataset + shard.
#[derive(Debug, Clone, Copy)]
pub struct DataClient<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub shard: &'a ClientShard,
}

impl<'a> DataClient<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset, shard: &'a ClientShard) -> Self {
        Self { spec, data, shard }
    }

    /// One client per shard.
    pub fn for_shards(spec: &'a ModelSpec, data: &'a Dataset, shards: &'a [ClientShard]) -> Vec<Self> {
        shards.iter().map(|s| Self::new(spec, data, s)).collect()
    }
}

impl LocalObjective for DataClient<'_> {
    fn client_id(&self) -> usize {
        self.shard.client_id
    }

    fn num_samples(&self) -> usize {
        self.shard.len()
    }

    fn loss_and_grad(&self, params: &ParamVector, positions: &[usize]) -> Result<(f64, ParamVector), OptimError> {
        let idx: Vec<usize> = positions.iter().map(|&p| self.shard.indices[p]).collect();
        let batch = self.data.batch(&idx)?;
        Ok(model::loss_and_grad(self.spec, params, &batch)?)
    }
}
