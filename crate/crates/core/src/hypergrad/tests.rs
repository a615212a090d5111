use super::*;
use crate::admm::MarketClearing;
use crate::testutil::{consumer_hub, flat_prices, gas_producer_hub, tiny_network};

#[test]
fn hypergradient_trivial_cases() {
    let pairs = [(0usize, 1usize), (0usize, 2usize)];
    let gamma = TariffMatrix::from_pairs(3, &[((0, 1), 0.02), ((0, 2), 0.05)].into());
    // No trades, no sensitivities: pure regularizer gradient.
    let trades: BTreeMap<PairId, Vec<f64>> =
        [((0, 1), vec![0.0; 2]), ((0, 2), vec![0.0; 2])].into();
    let hub_trades = vec![BTreeMap::new(), BTreeMap::new(), BTreeMap::new()];
    let sens = BTreeMap::new();
    let g = hypergradient(&gamma, &pairs, &trades, &hub_trades, &sens, 1e-7, 4.0);
    assert!((g[0] - 4.0 * 0.02).abs() < 1e-12);
    assert!((g[1] - 4.0 * 0.05).abs() < 1e-12);

    // Zero tariff: the gradient is the summed trade magnitude per pair.
    let zero = TariffMatrix::zeros(3);
    let trades: BTreeMap<PairId, Vec<f64>> =
        [((0, 1), vec![2.0, -1.0]), ((0, 2), vec![0.5, 0.5])].into();
    let g = hypergradient(&zero, &pairs, &trades, &hub_trades, &sens, 1e-7, 4.0);
    assert!((g[0] - 3.0).abs() < 1e-12);
    assert!((g[1] - 1.0).abs() < 1e-12);
}

#[test]
fn projection_examples() {
    // Already feasible: unchanged.
    let got = project_tariffs(&[0.3, 0.1], &[2.0, 1.0], 0.5).unwrap();
    assert_eq!(got, vec![0.3, 0.1]);
    // Nonpositive gap: elementwise clipping only.
    let got = project_tariffs(&[-0.2, 0.4], &[1.0, 1.0], -1.0).unwrap();
    assert_eq!(got, vec![0.0, 0.4]);
    // Single pair, hand KKT: min (g-0)^2 s.t. 2 g >= 1 gives g = 0.5.
    let got = project_tariffs(&[0.0], &[2.0], 1.0).unwrap();
    assert!((got[0] - 0.5).abs() < 1e-6, "{}", got[0]);
    // Grid-search check of the same projection.
    let mut best = (f64::INFINITY, 0.0);
    let mut g = 0.0;
    while g <= 2.0 {
        if 2.0 * g >= 1.0 {
            let d = g * g;
            if d < best.0 {
                best = (d, g);
            }
        }
        g += 1e-4;
    }
    assert!((got[0] - best.1).abs() < 1e-3);
    // No trades but a positive gap: nothing can recover it.
    assert!(matches!(
        project_tariffs(&[0.1], &[0.0], 1.0),
        Err(BilevelError::ProjectionInfeasible)
    ));
}

#[test]
fn schedule_properties() {
    let geo = StepSchedule::GeometricDecade { a: 2e-6 };
    // Positive everywhere, square-summable analytically: blocks of ten terms
    // give sum a^2 * 10 * sum_b 0.01^b = a^2 * 10 / 0.99.
    let mut sq = 0.0;
    for k in 0..1000 {
        let a = geo.alpha(k);
        assert!(a > 0.0);
        sq += a * a;
    }
    let bound = 2e-6_f64.powi(2) * 10.0 / 0.99;
    assert!(sq <= bound * (1.0 + 1e-12));

    // Harmonic partial sums dominate ln(n+1): non-summable.
    let har = StepSchedule::Harmonic { a: 1.0 };
    let mut partial = 0.0;
    for k in 0..100_000 {
        partial += har.alpha(k);
    }
    assert!(partial >= (100_001_f64).ln());
    let mut sq = 0.0;
    for k in 0..100_000 {
        sq += har.alpha(k).powi(2);
    }
    assert!(sq < 2.0); // Basel bound pi^2/6
}

fn no_trade_scenario() -> (crate::model::NetworkSpec, Vec<crate::model::HubSpec>, crate::model::PriceSet) {
    let horizon = 2;
    let net = tiny_network(horizon, 3);
    let hubs = vec![
        consumer_hub("a", 2, vec![2.0, 1.0]),
        consumer_hub("b", 3, vec![1.0, 2.0]),
    ];
    (net, hubs, flat_prices(horizon))
}

#[test]
fn bilevel_fixed_point_at_origin_without_profitable_trades() {
    let (net, hubs, prices) = no_trade_scenario();
    let horizon = 2;
    let base = crate::grid_opt::compute_no_trade_baseline(
        &net, &hubs, &prices, horizon, 1.0, 1e-10, 3000, 1e-9,
    )
    .unwrap();
    let w_nt_total: Vec<f64> = (0..horizon)
        .map(|t| base.w_nt.values().map(|s| s[t]).sum())
        .collect();
    let mut clearing =
        MarketClearing::new(net, hubs, prices.clone(), horizon, 1.0, 1e-9, 20_000, true).unwrap();
    let cfg = BilevelConfig {
        // A first step large enough to push the regularizer straight to the
        // origin before the stability check can bind.
        schedule: StepSchedule::Harmonic { a: 0.5 },
        eps_inner: 1e-8,
        w_max: 2000,
        ..BilevelConfig::default()
    };
    let out = run_bilevel(&mut clearing, &prices, &w_nt_total, None, None, None, &cfg).unwrap();
    assert!(out.converged, "history: {:?}", out.leader.history);
    for (&p, &g) in out.gamma_star.pair_values() {
        assert!(g.abs() < 1e-12, "pair {p:?} tariff {g}");
    }
    assert!(out.clearing.total_traded_energy() < 1e-3);
}

fn trading_scenario() -> (crate::model::NetworkSpec, Vec<crate::model::HubSpec>, crate::model::PriceSet) {
    let horizon = 2;
    let mut net = tiny_network(horizon, 3);
    // Lossy feeder lines so trading moves the loss balance.
    for l in net.lines.iter_mut() {
        l.m_loss = 0.04;
    }
    let hubs = vec![
        gas_producer_hub("p", 2, horizon, 12.0, 0.28),
        consumer_hub("c", 3, vec![6.0, 4.0]),
    ];
    (net, hubs, flat_prices(horizon))
}

#[test]
fn bilevel_recovers_loss_costs_within_sigma() {
    let (net, hubs, prices) = trading_scenario();
    let horizon = 2;
    let base = crate::grid_opt::compute_no_trade_baseline(
        &net, &hubs, &prices, horizon, 1.0, 1e-10, 3000, 1e-9,
    )
    .unwrap();
    let w_nt_total: Vec<f64> = (0..horizon)
        .map(|t| base.w_nt.values().map(|s| s[t]).sum())
        .collect();
    let mut clearing =
        MarketClearing::new(net, hubs, prices.clone(), horizon, 1.0, 1e-9, 20_000, true).unwrap();
    let cfg = BilevelConfig {
        eps_inner: 1e-8,
        w_max: 3000,
        ..BilevelConfig::default()
    };
    let out = run_bilevel(&mut clearing, &prices, &w_nt_total, None, None, None, &cfg).unwrap();
    assert!(out.converged);

    // Audit the recovery constraint at the returned point from outputs.
    let abs = out.clearing.abs_trades();
    let collected: f64 = abs
        .iter()
        .map(|(&p, &a)| out.gamma_star.get(p.0, p.1) * a)
        .sum();
    let w_total: Vec<f64> = (0..horizon)
        .map(|t| out.clearing.network_decision.total_loss_kw(t))
        .collect();
    let gap: f64 = w_total
        .iter()
        .zip(w_nt_total.iter())
        .zip(prices.c_e_out.iter())
        .map(|((w, wnt), c)| c * (w - wnt))
        .sum();
    assert!(
        collected >= gap - 0.2,
        "collected {collected} vs gap {gap}"
    );
    // Membership of the returned tariff in the constraint set.
    for (_, &g) in out.gamma_star.pair_values() {
        assert!(g >= 0.0);
    }
    assert!(out.clearing.total_traded_energy() > 1.0, "trading happened");
}

/// End-to-end check of the hypergradient against finite differences of the
/// leader objective through the inner loop, on a nondegenerate instance
/// with vertex-pinned trades.
#[test]
fn hypergradient_matches_end_to_end_finite_differences() {
    let (net, hubs, prices) = trading_scenario();
    let horizon = 2;
    let pairs = vec![(0usize, 1usize)];
    let gamma = TariffMatrix::uniform(2, 0.005);
    let none: BTreeMap<PairId, Vec<f64>> = BTreeMap::new();

    let mut clearing =
        MarketClearing::new(net, hubs, prices, horizon, 1.0, 1e-10, 40_000, true).unwrap();

    // Unordered-pair leader objective at a tariff value, re-clearing the
    // market from scratch at tight tolerance.
    let mut j_of = |g: f64| -> f64 {
        let tariff = TariffMatrix::uniform(2, g);
        let out = clearing
            .run(tariff.pair_values(), &none, None, 1e-12, 8000)
            .unwrap();
        assert!(out.converged);
        let abs = out.abs_trades();
        abs.iter()
            .map(|(&p, &a)| {
                let gm = tariff.get(p.0, p.1);
                gm * a + horizon as f64 * gm * gm
            })
            .sum()
    };
    let h = 1e-4;
    let fd = (j_of(0.005 + h) - j_of(0.005 - h)) / (2.0 * h);

    let out = clearing
        .run(gamma.pair_values(), &none, None, 1e-12, 8000)
        .unwrap();
    let cfg = BilevelConfig::default();
    let (blocks, hub_trades) = super::sensitivities_at_state(
        &mut clearing,
        &gamma,
        &none,
        &out.state,
        &pairs,
        &cfg,
    )
    .unwrap();
    let grad = hypergradient(
        &gamma,
        &pairs,
        &out.trades,
        &hub_trades,
        &blocks,
        1e-7,
        4.0,
    );
    let rel = (grad[0] - fd).abs() / fd.abs().max(1e-9);
    assert!(
        rel <= 1e-2,
        "hypergradient {} vs end-to-end fd {} (rel {rel})",
        grad[0],
        fd
    );
}
