use super::{AggMode, ClientUpdate, OptimError, UpdateOption};
use crate::model::ParamVector;

/// Aggregation weights in ascending client-id order. Weighted mode uses
/// `|D_k| / M` with `M` the participants' total sample count; naive mode
/// uses `1 / |S|`.
pub fn aggregation_weights(updates: &[&ClientUpdate], mode: AggMode) -> Vec<f64> {
    match mode {
        AggMode::Weighted => {
            let m: usize = updates.iter().map(|u| u.n_samples).sum();
            updates.iter().map(|u| u.n_samples as f64 / m as f64).collect()
        }
        AggMode::Naive => vec![1.0 / updates.len() as f64; updates.len()],
    }
}

/// Server update. Option I: `theta + eta_g * sum_k w_k * delta_k`;
/// Option II: `sum_k w_k * theta_k` (`eta_g` unused). Sums run in ascending
/// client id regardless of the input order.
pub fn aggregate(
    updates: &[ClientUpdate],
    mode: AggMode,
    option: UpdateOption,
    theta: &ParamVector,
    eta_g: f64,
) -> Result<ParamVector, OptimError> {
    if updates.is_empty() {
        return Err(OptimError::Contract("cannot aggregate an empty set of updates".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for u in &sorted {
        if u.option != option {
            return Err(OptimError::Contract(format!(
                "client {} sent a {:?} payload, server expects {option:?}",
                u.client_id, u.option
            )));
        }
        if !u.payload.same_layout(theta) {
            return Err(OptimError::Contract(format!("client {} payload layout differs from the model", u.client_id)));
        }
        if u.n_samples == 0 {
            return Err(OptimError::Contract(format!("client {} reports zero samples", u.client_id)));
        }
    }
    let weights = aggregation_weights(&sorted, mode);

    let first = sorted[0].payload.values();
    let mut acc: Vec<f64> = first.iter().map(|v| weights[0] * v).collect();
    for (u, &w) in sorted.iter().zip(&weights).skip(1) {
        for (a, v) in acc.iter_mut().zip(u.payload.values()) {
            *a += w * v;
        }
    }
    let values = match option {
        UpdateOption::Params => acc,
        UpdateOption::Delta => theta.values().iter().zip(&acc).map(|(t, d)| t + eta_g * d).collect(),
    };
    let next = theta.with_values(values)?;
    if !next.is_finite() {
        return Err(OptimError::Diverged { at: "aggregation".into(), last_finite: Box::new(theta.clone()) });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::Layout;

    fn scalar(v: f64) -> ParamVector {
        ParamVector::new(vec![v], Arc::new(Layout::single("w", 1))).unwrap()
    }

    fn update(id: usize, option: UpdateOption, v: f64, n: usize) -> ClientUpdate {
        ClientUpdate { client_id: id, option, payload: scalar(v), n_samples: n, train_loss: 0.0 }
    }

    #[test]
    fn worked_example_weighted_and_naive() {
        let ups = [update(0, UpdateOption::Delta, 10.0, 10), update(1, UpdateOption::Delta, 90.0, 90)];
        let zero = scalar(0.0);
        let w = aggregate(&ups, AggMode::Weighted, UpdateOption::Delta, &zero, 1.0).unwrap();
        let n = aggregate(&ups, AggMode::Naive, UpdateOption::Delta, &zero, 1.0).unwrap();
        assert_eq!(w.values(), &[82.0]);
        assert_eq!(n.values(), &[50.0]);
    }

    #[test]
    fn single_client_delta_lands_on_client_params() {
        let theta = scalar(0.25);
        let ups = [update(3, UpdateOption::Delta, 0.5, 7)];
        let next = aggregate(&ups, AggMode::Weighted, UpdateOption::Delta, &theta, 1.0).unwrap();
        assert_eq!(next.values(), &[0.75]);
    }

    #[test]
    fn convex_combination_option_two() {
        let ups = [
            update(2, UpdateOption::Params, 4.0, 7),
            update(0, UpdateOption::Params, 1.0, 1),
            update(1, UpdateOption::Params, 2.0, 2),
        ];
        let next = aggregate(&ups, AggMode::Weighted, UpdateOption::Params, &scalar(100.0), 5.0).unwrap();
        // (1*1 + 2*2 + 7*4) / 10
        assert!((next.values()[0] - 3.3).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_one() {
        let ups: Vec<ClientUpdate> = [3usize, 5, 11, 1].iter().enumerate().map(|(i, &n)| update(i, UpdateOption::Delta, 0.0, n)).collect();
        let refs: Vec<&ClientUpdate> = ups.iter().collect();
        for mode in [AggMode::Weighted, AggMode::Naive] {
            let s: f64 = aggregation_weights(&refs, mode).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_empty_and_mixed_payloads() {
        let theta = scalar(0.0);
        assert!(aggregate(&[], AggMode::Naive, UpdateOption::Delta, &theta, 1.0).is_err());
        let ups = [update(0, UpdateOption::Params, 1.0, 1)];
        assert!(aggregate(&ups, AggMode::Naive, UpdateOption::Delta, &theta, 1.0).is_err());
    }
}
