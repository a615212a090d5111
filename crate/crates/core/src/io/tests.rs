use super::*;
use crate::io::builtin::{ieee33_5hub, two_bus_toy};

#[test]
fn bundled_pack_has_reported_layout() {
    let s = ieee33_5hub(1);
    s.validate().unwrap();
    assert_eq!(s.network.buses.len(), 33);
    assert_eq!(s.network.lines.len(), 32);
    assert!(s.network.buses[0].is_main_grid);
    let hub_buses: Vec<usize> = s.hubs.iter().map(|h| h.bus).collect();
    assert_eq!(hub_buses, vec![4, 7, 10, 20, 23]);
    assert_eq!(s.horizon.t, 24);
    // Peak/off-peak pricing as reported.
    assert_eq!(s.prices.c_e_out[12], 0.27);
    assert_eq!(s.prices.c_e_out[2], 0.22);
    assert_eq!(s.prices.c_e_in[0], 0.12);
    assert_eq!(s.prices.c_g_out[0], 0.115);
}

#[test]
fn defaults_apply_for_omitted_algorithm_parameters() {
    let raw = serde_json::json!({
        "horizon": {"t": 2, "t_f": 2},
        "network": {
            "buses": [
                {"id": 1, "theta_limits": [-0.75, 0.75], "v_limits": [0.95, 1.05], "f_p": [0.0, 0.0], "is_main_grid": true},
                {"id": 2, "theta_limits": [-0.75, 0.75], "v_limits": [0.95, 1.05], "f_p": [1.0, 1.0]}
            ],
            "lines": [
                {"id": 1, "from_bus": 1, "to_bus": 2, "b_pu": 10.0, "g_pu": 0.0, "f_max_kw": 100.0, "m_loss": 0.0, "q_loss_kw": 0.0}
            ],
            "s_base_kw": 1000.0
        },
        "hubs": [],
        "prices": {"c_e_out": [0.25, 0.25], "c_e_in": [0.1, 0.1], "c_g_out": [0.1, 0.1], "c_mg": [0.2, 0.2]}
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("min.json");
    std::fs::write(&path, serde_json::to_string(&raw).unwrap()).unwrap();
    let s = load_scenario(&path).unwrap();
    assert_eq!(s.algorithm.eps, 0.2);
    assert_eq!(s.algorithm.w_max, 100);
    assert_eq!(s.algorithm.sigma, 0.2);
    assert_eq!(s.algorithm.k_max, 30);
    assert_eq!(s.algorithm.gamma0, 0.01);
    assert_eq!(s.algorithm.alpha0, 2e-6);
    assert_eq!(s.network.polygon_segments, 8);
}

#[test]
fn dangling_hub_bus_is_reported_with_path() {
    let mut s = two_bus_toy(2);
    s.hubs[1].bus = 99;
    let err = s.validate().unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("hubs[1].bus"), "message: {msg}");
    assert!(msg.contains("consumer"), "message: {msg}");
}

#[test]
fn scenario_round_trips_through_disk() {
    let s = two_bus_toy(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.json");
    export_scenario(&s, &path).unwrap();
    let loaded = load_scenario(&path).unwrap();
    // Structural equality via the canonical serialization.
    let a = serde_json::to_string(&s).unwrap();
    let b = serde_json::to_string(&loaded).unwrap();
    assert_eq!(a, b);
    // Second round trip is byte-identical.
    let path2 = dir.path().join("toy2.json");
    export_scenario(&loaded, &path2).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn exported_tables_have_expected_shape() {
    let scenario = two_bus_toy(4);
    let out = crate::runner::run(&scenario, &crate::runner::RunOverrides::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_results(&out, dir.path()).unwrap();
    let tariffs = std::fs::read_to_string(dir.path().join("tariffs.csv")).unwrap();
    let lines: Vec<&str> = tariffs.lines().collect();
    assert_eq!(lines[0], "window,pair_i,pair_j,gamma");
    // One unordered pair for two hubs.
    assert_eq!(lines.len(), 2);
    for name in [
        "trades.csv",
        "net_hub_trades.csv",
        "losses.csv",
        "costs.csv",
        "ledger.csv",
        "trace_inner.csv",
        "trace_outer.csv",
        "summary.csv",
    ] {
        let content = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(content.ends_with('\n'));
        assert!(!content.lines().next().unwrap().is_empty());
        for line in content.lines().skip(1) {
            for field in line.split(',') {
                if let Ok(v) = field.parse::<f64>() {
                    assert!(v.is_finite(), "{name}: non-finite field {field}");
                }
            }
        }
    }
}

#[test]
fn five_hub_pack_has_ten_pair_rows() {
    let s = ieee33_5hub(1);
    let pairs = crate::admm::all_pairs(s.hubs.len());
    assert_eq!(pairs.len(), 10);
}
