use fedlab::optim::{local_sgd, LocalSgdConfig};
use fedlab::toy::{
    drift_gap, drift_pair, global_optimum, mean_grad, naive_parameter_average, params_to_vec2, path_clients, quad_params,
    trace_descent, DescentMode, QuadClient, QuadObjective, ToyError, Vec2,
};
use proptest::prelude::*;

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `(A_1 + A_2)^-1 (A_1 m_1 + A_2 m_2)` for diagonal Hessians, coordinate by coordinate.
fn diagonal_oracle(a: [[f64; 2]; 2], m: [Vec2; 2]) -> Vec2 {
    [0, 1].map(|i| (a[0][i] * m[0][i] + a[1][i] * m[1][i]) / (a[0][i] + a[1][i]))
}

#[test]
fn asymmetric_pair() {
    let pair = drift_pair();
    let star = global_optimum(&pair).unwrap();
    let want = diagonal_oracle([[1.0, 4.0], [4.0, 1.0]], [[0.0, 0.0], [2.0, 2.0]]);
    assert!(dist(star, want) <= 1e-12);
    assert!(dist(star, [1.6, 0.4]) <= 1e-12);
    assert_eq!(naive_parameter_average(&pair).unwrap(), [1.0, 1.0]);
    let gap = drift_gap(&pair).unwrap();
    assert!((gap - 0.6 * 2f64.sqrt()).abs() <= 1e-12);
    assert!((gap - 0.8485).abs() <= 1e-4);
}

#[test]
fn symmetric_and_single_cases() {
    let pair = [
        QuadClient::diag(1.0, 1.0, [0.0, 0.0]).unwrap(),
        QuadClient::diag(1.0, 1.0, [2.0, 0.0]).unwrap(),
    ];
    assert_eq!(global_optimum(&pair).unwrap(), [1.0, 0.0]);
    assert_eq!(naive_parameter_average(&pair).unwrap(), [1.0, 0.0]);
    let one = [QuadClient::new([[2.0, 0.3], [0.3, 1.0]], [-0.7, 4.0]).unwrap()];
    assert!(dist(global_optimum(&one).unwrap(), [-0.7, 4.0]) <= 1e-12);
    assert!(global_optimum(&[]).is_err());
    assert!(drift_gap(&[]).is_err());
}

#[test]
fn gap_scales_with_minimizers() {
    let base = drift_gap(&drift_pair()).unwrap();
    for c in [-3.0, 0.5, 2.0] {
        let scaled: Vec<QuadClient> = drift_pair()
            .iter()
            .map(|q| QuadClient::new(q.hessian(), q.minimizer().map(|v| c * v)).unwrap())
            .collect();
        assert!((drift_gap(&scaled).unwrap() - c.abs() * base).abs() <= 1e-12);
    }
}

#[test]
fn gd_on_the_identity_halves() {
    let c = [QuadClient::diag(1.0, 1.0, [0.0, 0.0]).unwrap()];
    let t = trace_descent(&c, DescentMode::Gd, [1.0, 0.0], 0.5, 10, 0).unwrap();
    assert_eq!(t.points.len(), 11);
    for (i, p) in t.points.iter().enumerate() {
        assert_eq!(*p, [0.5f64.powi(i as i32), 0.0]);
    }
}

#[test]
fn gd_loss_never_increases() {
    let clients = path_clients();
    // mean Hessian eigenvalues stay below 2, so 0.5 < 2 / lambda_max
    let t = trace_descent(&clients, DescentMode::Gd, [2.5, 2.5], 0.5, 200, 0).unwrap();
    // once at the optimum the loss evaluation itself wobbles by an ulp
    assert!(t.losses.windows(2).all(|w| w[1] <= w[0] + f64::EPSILON * w[0]));
    assert!(t.losses[..15].windows(2).all(|w| w[1] < w[0]));
    let star = global_optimum(&clients).unwrap();
    assert!(dist(t.last(), star) < 1e-8);
}

#[test]
fn sgd_ends_farther_from_the_optimum_than_gd() {
    let pair = drift_pair();
    let star = global_optimum(&pair).unwrap();
    let (eta, steps) = (0.05, 300);
    let gd = dist(trace_descent(&pair, DescentMode::Gd, [3.0, -2.0], eta, steps, 0).unwrap().last(), star);
    let sgd: f64 = (0..100)
        .map(|s| dist(trace_descent(&pair, DescentMode::Sgd, [3.0, -2.0], eta, steps, s).unwrap().last(), star))
        .sum::<f64>()
        / 100.0;
    assert!(sgd > gd, "{sgd} vs {gd}");
}

#[test]
fn descent_is_seeded() {
    let c = path_clients();
    let a = trace_descent(&c, DescentMode::Minibatch(2), [1.0, 1.0], 0.1, 30, 4).unwrap();
    assert_eq!(a, trace_descent(&c, DescentMode::Minibatch(2), [1.0, 1.0], 0.1, 30, 4).unwrap());
    assert_ne!(a, trace_descent(&c, DescentMode::Minibatch(2), [1.0, 1.0], 0.1, 30, 5).unwrap());
    let full = trace_descent(&c, DescentMode::Minibatch(4), [1.0, 1.0], 0.1, 30, 4).unwrap();
    assert_eq!(full, trace_descent(&c, DescentMode::Gd, [1.0, 1.0], 0.1, 30, 9).unwrap());
    assert!(trace_descent(&c, DescentMode::Minibatch(0), [1.0, 1.0], 0.1, 30, 4).is_err());
}

#[test]
fn descent_reports_divergence() {
    let c = [QuadClient::diag(1.0, 1.0, [0.0, 0.0]).unwrap()];
    match trace_descent(&c, DescentMode::Gd, [1.0, 1.0], 1e100, 100, 0) {
        Err(ToyError::Diverged { last_finite, .. }) => assert!(last_finite.iter().all(|v| v.is_finite())),
        other => panic!("{other:?}"),
    }
}

#[test]
fn local_sgd_limits() {
    let pair = drift_pair();
    let devices = QuadObjective::for_clients(&pair);
    let start = quad_params([3.0, -2.0]);
    let run = |eta: f64, period: usize, syncs: usize| {
        let cfg = LocalSgdConfig { eta, batch_size: 1, syncs, sync_period: period, seed: 0 };
        params_to_vec2(&local_sgd(&devices, &start, &cfg).unwrap().params)
    };
    let frequent = run(0.01, 1, 5000);
    let rare = run(0.05, 2000, 3);
    assert!(dist(frequent, global_optimum(&pair).unwrap()) < 1e-2, "{frequent:?}");
    assert!(dist(rare, naive_parameter_average(&pair).unwrap()) < 1e-2, "{rare:?}");
}

fn arb_spd() -> impl Strategy<Value = [[f64; 2]; 2]> {
    (0.1f64..5.0, 0.1f64..5.0, -0.9f64..0.9).prop_map(|(a, d, r)| {
        let b = r * (a * d).sqrt();
        [[a, b], [b, d]]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn equal_hessians_mean_no_drift(
        a in arb_spd(),
        ms in proptest::collection::vec(proptest::array::uniform2(-10.0f64..10.0), 1..6),
    ) {
        let clients: Vec<QuadClient> = ms.iter().map(|&m| QuadClient::new(a, m).unwrap()).collect();
        prop_assert!(drift_gap(&clients).unwrap() <= 1e-10);
    }

    #[test]
    fn optimum_zeroes_the_mean_gradient(
        hs in proptest::collection::vec(arb_spd(), 1..6),
        ms in proptest::collection::vec(proptest::array::uniform2(-3.0f64..3.0), 5),
    ) {
        let clients: Vec<QuadClient> = hs.iter().zip(&ms).map(|(&a, &m)| QuadClient::new(a, m).unwrap()).collect();
        let g = mean_grad(&clients, global_optimum(&clients).unwrap());
        prop_assert!(g[0].hypot(g[1]) < 1e-10);
    }
}
