use rand::seq::index;
use rayon::prelude::*;

use super::sgd::local_train;
use super::{aggregate, ClientUpdate, DataClient, FedConfig, LocalObjective, OptimError, RoundResult, UpdateOption};
use crate::data::{ClientShard, Dataset};
use crate::diagnostics::{self, RoundMetrics};
use crate::model::{ModelSpec, ParamVector};
use crate::rng::{self, Purpose};

/// `max(ceil(frac * k), 1)`, capped at `k`. The small slack keeps products
/// such as `0.2 * 10` from rounding up to the next integer.
pub fn participant_count(k: usize, frac: f64) -> usize {
    let m = (frac * k as f64 - 1e-9).ceil();
    (m.max(1.0) as usize).min(k)
}

/// Round `round`'s participants: a uniform draw without replacement from
/// `0..k`, ascending.
pub fn select_participants(k: usize, frac: f64, seed: u64, round: usize) -> Vec<usize> {
    let m = participant_count(k, frac);
    if m == k {
        return (0..k).collect();
    }
    let mut rng = rng::stream(seed, Purpose::Sampling, &[round as u64]);
    let mut chosen = index::sample(&mut rng, k, m).into_vec();
    chosen.sort_unstable();
    chosen
}

fn sorted_clients<'a, O: LocalObjective>(clients: &'a [O], cfg: &FedConfig) -> Result<Vec<&'a O>, OptimError> {
    cfg.validate()?;
    if clients.len() != cfg.clients {
        return Err(OptimError::Config(format!("{} clients supplied for K = {}", clients.len(), cfg.clients)));
    }
    let mut refs: Vec<&O> = clients.iter().collect();
    refs.sort_by_key(|c| c.client_id());
    if refs.iter().enumerate().any(|(i, c)| c.client_id() != i) {
        return Err(OptimError::Contract("client ids must be 0..K".into()));
    }
    Ok(refs)
}

fn round_with<O: LocalObjective>(
    clients: &[&O],
    global: &ParamVector,
    cfg: &FedConfig,
    round: usize,
) -> Result<RoundResult, OptimError> {
    let participants = select_participants(cfg.clients, cfg.client_frac, cfg.seed, round);
    let first_epoch = (round * cfg.local_epochs) as u64;
    let outs: Vec<Result<ClientUpdate, OptimError>> = participants
        .par_iter()
        .map(|&k| {
            let client = clients[k];
            let trained = local_train(client, global, cfg.eta_l, cfg.batch_size, first_epoch, cfg.local_epochs, cfg.seed)
                .map_err(|e| match e {
                    OptimError::Diverged { last_finite, .. } => {
                        OptimError::ClientDiverged { client_id: k, round, last_finite }
                    }
                    other => other,
                })?;
            let train_loss = trained.mean_loss();
            let payload = match cfg.option {
                UpdateOption::Delta => trained.params.sub(global),
                UpdateOption::Params => trained.params,
            };
            Ok(ClientUpdate { client_id: k, option: cfg.option, payload, n_samples: client.num_samples(), train_loss })
        })
        .collect();
    // participants are ascending, so the first error is the lowest failing id
    let updates = outs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let next = aggregate(&updates, cfg.agg, cfg.option, global, cfg.eta_g).map_err(|e| match e {
        OptimError::Diverged { at, last_finite } => OptimError::Diverged { at: format!("round {round} {at}"), last_finite },
        other => other,
    })?;
    Ok(RoundResult { round, global: next, participants, updates })
}

/// One FedAvg round (0-based `round`) from `global`.
pub fn fedavg_round<O: LocalObjective>(
    clients: &[O],
    global: &ParamVector,
    cfg: &FedConfig,
    round: usize,
) -> Result<RoundResult, OptimError> {
    let clients = sorted_clients(clients, cfg)?;
    round_with(&clients, global, cfg, round)
}

/// Outcome of a FedAvg run. On failure the rounds completed so far are kept.
#[derive(Debug)]
pub struct FedRun {
    pub metrics: Vec<RoundMetrics>,
    /// Global parameters after the last completed round.
    pub final_params: ParamVector,
    pub failure: Option<OptimError>,
}

/// What the server evaluates after each round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub spec: &'a ModelSpec,
    pub test: &'a Dataset,
    pub eval_batch: usize,
    /// Compute layer-wise cosine similarity of the round's updates.
    pub cosine: bool,
}

/// [`fedavg_run_with`] without an observer.
pub fn fedavg_run(
    ctx: &RoundContext,
    train: &Dataset,
    shards: &[ClientShard],
    init: &ParamVector,
    cfg: &FedConfig,
) -> FedRun {
    fedavg_run_with(ctx, train, shards, init, cfg, |_, _| Ok(()))
}

/// `cfg.rounds` rounds of FedAvg over one client per shard. `observer` sees
/// every round's result and metrics as soon as they exist; an observer error
/// stops the run.
pub fn fedavg_run_with<F>(
    ctx: &RoundContext,
    train: &Dataset,
    shards: &[ClientShard],
    init: &ParamVector,
    cfg: &FedConfig,
    mut observer: F,
) -> FedRun
where
    F: FnMut(&RoundResult, &RoundMetrics) -> Result<(), OptimError>,
{
    let mut run = FedRun { metrics: Vec::with_capacity(cfg.rounds), final_params: init.clone(), failure: None };
    let owned = DataClient::for_shards(ctx.spec, train, shards);
    let clients = match sorted_clients(&owned, cfg) {
        Ok(c) => c,
        Err(e) => {
            run.failure = Some(e);
            return run;
        }
    };
    for r in 0..cfg.rounds {
        let step = round_with(&clients, &run.final_params, cfg, r).and_then(|res| {
            let m = round_metrics(ctx, &res, &run.final_params)?;
            observer(&res, &m)?;
            Ok((res, m))
        });
        match step {
            Ok((res, m)) => {
                run.final_params = res.global;
                run.metrics.push(m);
            }
            Err(e) => {
                run.failure = Some(e);
                break;
            }
        }
    }
    run
}

fn round_metrics(ctx: &RoundContext, res: &RoundResult, previous: &ParamVector) -> Result<RoundMetrics, OptimError> {
    let (test_acc, test_loss) = diagnostics::evaluate_global(ctx.spec, &res.global, ctx.test, ctx.eval_batch)?;
    let cosine = if ctx.cosine && res.updates.len() >= 2 {
        let deltas: Vec<ClientUpdate> = res
            .updates
            .iter()
            .map(|u| ClientUpdate {
                client_id: u.client_id,
                option: UpdateOption::Delta,
                payload: u.delta(previous),
                n_samples: u.n_samples,
                train_loss: u.train_loss,
            })
            .collect();
        diagnostics::pairwise_cosine(res.round + 1, &deltas, previous.layout())?
    } else {
        Vec::new()
    };
    Ok(RoundMetrics::new(res.round + 1, test_acc, test_loss, &res.updates, cosine))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn participant_counts() {
        assert_eq!(participant_count(10, 0.2), 2);
        assert_eq!(participant_count(10, 0.15), 2);
        assert_eq!(participant_count(10, 0.01), 1);
        assert_eq!(participant_count(10, 1.0), 10);
        assert_eq!(participant_count(3, 0.7), 3);
    }

    #[test]
    fn selection_is_sorted_distinct_and_seeded() {
        let a = select_participants(10, 0.3, 5, 7);
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, select_participants(10, 0.3, 5, 7));
        assert_eq!(select_participants(4, 1.0, 5, 7), vec![0, 1, 2, 3]);
    }
}
