//! Server-side evaluation and the per-round instruments: client loss traces,
//! layer-wise cosine similarity of client updates and the overfit round.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::model::{self, Layout, ModelError, ModelSpec, ParamVector};
use crate::optim::{ClientUpdate, UpdateOption};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Mean cosine similarity of one layer's updates over participant pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRecord {
    /// 1-based round.
    pub round: usize,
    pub layer: String,
    /// `None` when every pair was excluded.
    pub mean_cos: Option<f64>,
    /// All unordered pairs, `|S| (|S| - 1) / 2`.
    pub pair_count: usize,
    /// Pairs left out because one side had a zero-norm segment.
    pub excluded_pairs: usize,
}

/// One row of the run history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    /// 1-based round.
    pub round: usize,
    pub test_acc: f64,
    pub test_loss: f64,
    pub train_loss_mean: f64,
    pub per_client_losses: BTreeMap<usize, f64>,
    pub cosine: Vec<SimilarityRecord>,
    /// Ascending client ids.
    pub participants: Vec<usize>,
}

impl RoundMetrics {
    pub fn new(
        round: usize,
        test_acc: f64,
        test_loss: f64,
        updates: &[ClientUpdate],
        cosine: Vec<SimilarityRecord>,
    ) -> Self {
        let per_client_losses: BTreeMap<usize, f64> = updates.iter().map(|u| (u.client_id, u.train_loss)).collect();
        let train_loss_mean = if per_client_losses.is_empty() {
            0.0
        } else {
            per_client_losses.values().sum::<f64>() / per_client_losses.len() as f64
        };
        let participants = per_client_losses.keys().copied().collect();
        Self { round, test_acc, test_loss, train_loss_mean, per_client_losses, cosine, participants }
    }

    /// Mean of the per-layer similarities, skipping undefined layers.
    pub fn mean_cosine(&self) -> Option<f64> {
        mean_over_layers(&self.cosine)
    }
}

/// Exact dataset-wide top-1 accuracy and mean loss, evaluated in chunks of
/// `eval_batch` samples.
pub fn evaluate_global(
    spec: &ModelSpec,
    params: &ParamVector,
    test: &Dataset,
    eval_batch: usize,
) -> Result<(f64, f64), DiagError> {
    if test.is_empty() {
        return Err(DiagError::Contract("test set is empty".into()));
    }
    let chunk = eval_batch.max(1);
    let all: Vec<usize> = (0..test.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for idx in all.chunks(chunk) {
        let batch = test.batch(idx)?;
        let (l, c) = model::loss_sum_and_correct(spec, params, &batch)?;
        loss_sum += l;
        correct += c;
    }
    let n = test.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

/// Per-layer mean pairwise cosine similarity of Option I payloads.
pub fn pairwise_cosine(
    round: usize,
    updates: &[ClientUpdate],
    layout: &Layout,
) -> Result<Vec<SimilarityRecord>, DiagError> {
    if updates.len() < 2 {
        return Err(DiagError::Contract(format!("need at least two updates, got {}", updates.len())));
    }
    for u in updates {
        if u.option != UpdateOption::Delta {
            return Err(DiagError::Contract(format!("client {} sent parameters, not an update", u.client_id)));
        }
        if u.payload.layout() != layout {
            return Err(DiagError::Contract(format!("client {} update layout differs", u.client_id)));
        }
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);

    let mut out = Vec::with_capacity(layout.slices().len());
    for s in layout.slices() {
        let segs: Vec<&[f64]> = sorted.iter().map(|u| &u.payload.values()[s.range()]).collect();
        let norms: Vec<f64> = segs.iter().map(|v| dot(v, v).sqrt()).collect();
        let mut sum = 0.0;
        let mut used = 0;
        let mut excluded = 0;
        for i in 0..segs.len() {
            for j in i + 1..segs.len() {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    excluded += 1;
                    continue;
                }
                sum += (dot(segs[i], segs[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                used += 1;
            }
        }
        out.push(SimilarityRecord {
            round,
            layer: s.name.clone(),
            mean_cos: (used > 0).then(|| sum / used as f64),
            pair_count: used + excluded,
            excluded_pairs: excluded,
        });
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean_over_layers(records: &[SimilarityRecord]) -> Option<f64> {
    let defined: Vec<f64> = records.iter().filter_map(|r| r.mean_cos).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// 1-based index of the minimum test loss, earliest on ties.
pub fn overfit_round(test_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in test_losses.iter().enumerate() {
        if best.is_none_or(|b| l < test_losses[b]) {
            best = Some(i);
        }
    }
    best.map(|i| i + 1)
}

/// Per-client training-loss series; `None` marks rounds the client sat out.
pub fn loss_traces(history: &[RoundMetrics], clients: usize) -> Vec<Vec<Option<f64>>> {
    (0..clients).map(|k| history.iter().map(|m| m.per_client_losses.get(&k).copied()).collect()).collect()
}

/// Population standard deviation of the participants' losses in each round.
pub fn loss_dispersion(history: &[RoundMetrics]) -> Vec<f64> {
    history
        .iter()
        .map(|m| {
            let n = m.per_client_losses.len() as f64;
            if n == 0.0 {
                return 0.0;
            }
            let mean = m.per_client_losses.values().sum::<f64>() / n;
            (m.per_client_losses.values().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_examples() {
        assert_eq!(overfit_round(&[3.0, 2.0, 1.0, 2.0, 3.0]), Some(3));
        assert_eq!(overfit_round(&[5.0, 4.0, 3.0]), Some(3));
        assert_eq!(overfit_round(&[2.0, 1.0, 1.0, 2.0]), Some(2));
        assert_eq!(overfit_round(&[]), None);
    }
}
