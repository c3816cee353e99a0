use std::sync::Arc;

use fedlab::data::{partition_dirichlet, partition_iid_balanced, synth_blobs, synth_blobs_split, BlobParams, Dataset};
use fedlab::diagnostics::{
    evaluate_global, loss_dispersion, loss_traces, mean_over_layers, overfit_round, pairwise_cosine, DiagError,
};
use fedlab::model::{self, init_params, LayerSlice, Layout, ModelSpec, ParamVector};
use fedlab::optim::{fedavg_run, AggMode, ClientUpdate, FedConfig, RoundContext, UpdateOption};
use proptest::prelude::*;

fn layout() -> Arc<Layout> {
    Arc::new(
        Layout::new(vec![
            LayerSlice { name: "a".into(), start: 0, len: 3 },
            LayerSlice { name: "b".into(), start: 3, len: 2 },
        ])
        .unwrap(),
    )
}

fn delta(id: usize, values: Vec<f64>) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        option: UpdateOption::Delta,
        payload: ParamVector::new(values, layout()).unwrap(),
        n_samples: 1,
        train_loss: 0.0,
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn evaluation_is_batching_invariant_and_matches_per_sample_oracle() {
    let test = synth_blobs(333, 5, 7, 0.6, 2).unwrap();
    let spec = ModelSpec::logistic(7, 5);
    let params = init_params(&spec, 9).unwrap();
    let (acc_a, loss_a) = evaluate_global(&spec, &params, &test, 100).unwrap();
    let (acc_b, loss_b) = evaluate_global(&spec, &params, &test, 1000).unwrap();
    assert_eq!(acc_a, acc_b);
    assert!((loss_a - loss_b).abs() <= 1e-12 * loss_b);

    // softmax cross-entropy one sample at a time; the layer holds the
    // class-major weight rows, then the biases
    let layer = params.segment("fc1").unwrap();
    let (w, bias) = layer.split_at(35);
    let (mut loss, mut correct) = (0.0, 0);
    for i in 0..test.len() {
        let x = test.sample(i);
        let logits: Vec<f64> =
            (0..5).map(|c| bias[c] + (0..7).map(|j| w[c * 7 + j] * x[j]).sum::<f64>()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let y = test.labels().values()[i];
        loss += lse - logits[y];
        let best = (0..5).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
        correct += usize::from(best == y);
    }
    assert!((loss_a - loss / 333.0).abs() <= 1e-12 * loss_a);
    assert_eq!(acc_a, correct as f64 / 333.0);
}

#[test]
fn perfect_model_scores_one() {
    let ds = synth_blobs(100, 3, 4, 0.0, 1).unwrap();
    let spec = ModelSpec::logistic(4, 3);
    let mut params = init_params(&spec, 0).unwrap();
    // scale a separating solution until the loss vanishes
    let fit = fedlab::optim::sgd_run(
        &spec,
        &ds,
        &params,
        &fedlab::optim::SgdConfig { eta: 1.0, batch_size: 100, epochs: 200, seed: 0 },
    )
    .unwrap();
    params = fit.params;
    params.scale(1000.0);
    let (acc, loss) = evaluate_global(&spec, &params, &ds, 30).unwrap();
    assert_eq!(acc, 1.0);
    assert!(loss < 1e-6, "{loss}");
}

#[test]
fn evaluation_rejects_an_empty_test_set() {
    let full = synth_blobs(10, 2, 3, 0.1, 0).unwrap();
    let empty = Dataset::new("empty", full.shape(), vec![], fedlab::data::Labels::new(vec![], 2).unwrap()).unwrap();
    let spec = ModelSpec::logistic(3, 2);
    let p = init_params(&spec, 0).unwrap();
    assert!(matches!(evaluate_global(&spec, &p, &empty, 10), Err(DiagError::Contract(_))));
}

#[test]
fn identical_and_opposite_updates() {
    let v = vec![0.3, -1.0, 2.0, 0.5, 0.25];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let same = pairwise_cosine(1, &[delta(0, v.clone()), delta(1, v.clone())], &layout()).unwrap();
    let opp = pairwise_cosine(1, &[delta(0, v), delta(1, neg)], &layout()).unwrap();
    for r in &same {
        assert!((r.mean_cos.unwrap() - 1.0).abs() <= 1e-15);
        assert_eq!(r.pair_count, 1);
    }
    for r in &opp {
        assert!((r.mean_cos.unwrap() + 1.0).abs() <= 1e-15);
    }
    assert_eq!(same.iter().map(|r| r.layer.as_str()).collect::<Vec<_>>(), ["a", "b"]);
}

#[test]
fn zero_segments_are_excluded_and_counted() {
    let ups = [
        delta(0, vec![1.0, 0.0, 0.0, 0.0, 0.0]),
        delta(1, vec![1.0, 1.0, 0.0, 1.0, 0.0]),
        delta(2, vec![0.0, 1.0, 0.0, 0.0, 0.0]),
    ];
    let recs = pairwise_cosine(3, &ups, &layout()).unwrap();
    assert_eq!(recs[0].pair_count, 3);
    assert_eq!(recs[0].excluded_pairs, 0);
    assert_eq!(recs[1].pair_count, 3);
    assert_eq!(recs[1].excluded_pairs, 3);
    assert_eq!(recs[1].mean_cos, None);
    assert_eq!(mean_over_layers(&recs), recs[0].mean_cos);
}

#[test]
fn cosine_contracts() {
    let one = [delta(0, vec![1.0; 5])];
    assert!(pairwise_cosine(1, &one, &layout()).is_err());
    let mut params = delta(1, vec![1.0; 5]);
    params.option = UpdateOption::Params;
    assert!(pairwise_cosine(1, &[delta(0, vec![1.0; 5]), params], &layout()).is_err());
    let other = Layout::single("w", 5);
    assert!(pairwise_cosine(1, &[delta(0, vec![1.0; 5]), delta(1, vec![2.0; 5])], &other).is_err());
}

#[test]
fn overfit_round_examples() {
    assert_eq!(overfit_round(&[3.0, 2.0, 1.0, 2.0, 3.0]), Some(3));
    assert_eq!(overfit_round(&[5.0, 4.0, 3.0]), Some(3));
    assert_eq!(overfit_round(&[2.0, 1.0, 1.0, 2.0]), Some(2));
    assert_eq!(overfit_round(&[]), None);
}

fn small_run(partition: &str, seed: u64, frac: f64, rounds: usize) -> Vec<fedlab::diagnostics::RoundMetrics> {
    let p = BlobParams { classes: 10, dim: 16, spread: 0.35 };
    let (train, test) = synth_blobs_split(&p, 1000, 300, seed).unwrap();
    let shards = match partition {
        "iid" => partition_iid_balanced(train.labels(), 10, seed).unwrap(),
        _ => partition_dirichlet(train.labels(), 10, 0.1, seed).unwrap(),
    };
    let spec = ModelSpec::mlp(16, vec![8], 10);
    let init = init_params(&spec, seed).unwrap();
    let cfg = FedConfig {
        eta_l: 0.2,
        batch_size: 10,
        local_epochs: 2,
        rounds,
        client_frac: frac,
        agg: AggMode::Weighted,
        seed,
        ..FedConfig::base()
    };
    let ctx = RoundContext { spec: &spec, test: &test, eval_batch: 1000, cosine: true };
    let run = fedavg_run(&ctx, &train, &shards, &init, &cfg);
    assert!(run.failure.is_none());
    run.metrics
}

#[test]
fn traces_have_gaps_exactly_where_clients_sat_out() {
    let history = small_run("iid", 0, 0.5, 6);
    let traces = loss_traces(&history, 10);
    assert_eq!(traces.len(), 10);
    for (k, series) in traces.iter().enumerate() {
        assert_eq!(series.len(), 6);
        for (r, v) in series.iter().enumerate() {
            assert_eq!(v.is_some(), history[r].participants.contains(&k));
            if let Some(x) = v {
                assert_eq!(*x, history[r].per_client_losses[&k]);
            }
        }
    }
    for m in &history {
        assert_eq!(m.participants.len(), 5);
        let mean = m.per_client_losses.values().sum::<f64>() / 5.0;
        assert!((m.train_loss_mean - mean).abs() <= 1e-15);
        assert!(m.cosine.iter().all(|r| r.pair_count == 10));
        assert!(m.cosine.iter().filter_map(|r| r.mean_cos).all(|c| (-1.0..=1.0).contains(&c)));
    }

    let full = small_run("iid", 0, 1.0, 3);
    assert!(loss_traces(&full, 10).iter().flatten().all(Option::is_some));
}

#[test]
fn client_losses_spread_more_under_label_skew() {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mut iid, mut skew) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        iid.push(mean(&loss_dispersion(&small_run("iid", seed, 1.0, 10))));
        skew.push(mean(&loss_dispersion(&small_run("dirichlet", seed, 1.0, 10))));
    }
    assert!(mean(&skew) > mean(&iid), "{skew:?} vs {iid:?}");
}

#[test]
fn cosine_is_higher_under_iid() {
    let mean_cos = |h: &[fedlab::diagnostics::RoundMetrics]| {
        let v: Vec<f64> = h.iter().filter_map(|m| m.mean_cosine()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (mut iid, mut skew) = (0.0, 0.0);
    for seed in 0..3 {
        iid += mean_cos(&small_run("iid", seed, 1.0, 10));
        skew += mean_cos(&small_run("dirichlet", seed, 1.0, 10));
    }
    assert!(iid > skew, "{iid} vs {skew}");
}

fn arb_updates() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..6).prop_flat_map(|n| proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 5), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosine_matches_enumeration_and_is_scale_free(vs in arb_updates(), c in 0.01f64..100.0, rot in 0usize..5) {
        let ups: Vec<ClientUpdate> = vs.iter().cloned().enumerate().map(|(i, v)| delta(i, v)).collect();
        let recs = pairwise_cosine(2, &ups, &layout()).unwrap();
        for (rec, range) in recs.iter().zip([0..3, 3..5]) {
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    sum += cos(&vs[i][range.clone()], &vs[j][range.clone()]);
                    n += 1;
                }
            }
            prop_assert_eq!(rec.pair_count, n);
            prop_assert!((rec.mean_cos.unwrap() - sum / n as f64).abs() <= 1e-12);
        }

        let scaled: Vec<ClientUpdate> =
            vs.iter().enumerate().map(|(i, v)| delta(i, v.iter().map(|x| c * x).collect())).collect();
        let mut shuffled = ups.clone();
        shuffled.rotate_left(rot % ups.len());
        shuffled.reverse();
        let a = pairwise_cosine(2, &scaled, &layout()).unwrap();
        let b = pairwise_cosine(2, &shuffled, &layout()).unwrap();
        for ((x, y), z) in recs.iter().zip(&a).zip(&b) {
            prop_assert!((x.mean_cos.unwrap() - y.mean_cos.unwrap()).abs() <= 1e-12);
            prop_assert_eq!(x, z);
        }
    }

    #[test]
    fn evaluation_is_batching_invariant(eval_batch in 1usize..200, seed in 0u64..50) {
        let test = synth_blobs(150, 4, 5, 0.5, seed).unwrap();
        let spec = ModelSpec::mlp(5, vec![4], 4);
        let p = init_params(&spec, seed).unwrap();
        let (acc, loss) = evaluate_global(&spec, &p, &test, eval_batch).unwrap();
        let all = test.full_batch().unwrap();
        prop_assert_eq!(acc, model::accuracy(&spec, &p, &all).unwrap());
        let whole = model::loss(&spec, &p, &all).unwrap();
        prop_assert!((loss - whole).abs() <= 1e-12 * whole);
    }
}
