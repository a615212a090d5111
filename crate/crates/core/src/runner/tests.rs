use super::*;
use crate::io::builtin::two_bus_toy;

#[test]
fn one_day_run_settles_once() {
    let scenario = two_bus_toy(4);
    let out = run(&scenario, &RunOverrides::default()).unwrap();
    assert_eq!(out.windows.len(), 1);
    assert_eq!(out.settlements.len(), 1);
    assert!(out.ledger.conservation_residual() < 1e-9);
}

#[test]
fn multi_window_single_settlement_schedule() {
    // Three daily windows, one settlement covering all of them.
    let scenario = retile_days(&two_bus_toy(4), 3);
    let mut scenario = scenario;
    scenario.horizon.t_f = 12;
    let out = run(&scenario, &RunOverrides::default()).unwrap();
    assert_eq!(out.windows.len(), 3);
    assert_eq!(out.settlements.len(), 1);
    assert_eq!(out.settlements[0].windows, (0, 2));
}

#[test]
fn constant_gamma_skips_outer_loop() {
    let scenario = two_bus_toy(4);
    let ov = RunOverrides {
        constant_gamma: Some(0.005),
        ..Default::default()
    };
    let out = run(&scenario, &ov).unwrap();
    assert_eq!(out.windows[0].outer_iterations, 0);
    assert!(out.windows[0].outer_trace.is_empty());
    for (&(i, j), _) in out.windows[0].trades.iter() {
        assert!((out.windows[0].gamma.get(i, j) - 0.005).abs() < 1e-15);
    }
}

#[test]
fn tariff_receipts_match_collected() {
    let scenario = two_bus_toy(6);
    let ov = RunOverrides {
        constant_gamma: Some(0.01),
        ..Default::default()
    };
    let out = run(&scenario, &ov).unwrap();
    let receipts = out.ledger.network_tariff_receipts();
    let collected: f64 = out.windows.iter().map(|w| w.tariff_collected).sum();
    assert!(
        (receipts - collected).abs() < 1e-9,
        "receipts {receipts} vs collected {collected}"
    );
}
