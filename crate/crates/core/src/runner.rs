//! Rolling-horizon orchestration: per-window baselines and bilevel solves,
//! warm starts across windows, tariff settlement every window and trade
//! settlement every `t_f` steps.

use std::collections::BTreeMap;

use crate::admm::{AdmmError, MarketClearing, MarketState, PairId};
use crate::fair_pricing::{
    settle, solve_fair_prices, solve_fair_prices_centralized, FairPricingConfig,
    FairPricingError, FairPricingInputs, FairnessReport, Ledger, TradePriceMatrix,
};
use crate::grid_opt::compute_no_trade_baseline;
use crate::hub_opt::hub_cost;
use crate::hypergrad::{
    run_bilevel, BilevelConfig, BilevelError, OuterTraceRow, StepSchedule, TariffMatrix,
};
use crate::io::{Scenario, ScenarioError};
use crate::model::{Cap, HubSpec, NetworkSpec, PriceSet};
use crate::oracle::centralized_clearing;
use crate::sensitivity::SensitivityParams;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Bilevel(#[from] BilevelError),
    #[error(transparent)]
    Fair(#[from] FairPricingError),
    #[error("result export failed: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code: 1 infeasible/numerical, 2 configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Scenario(_) => 2,
            _ => 1,
        }
    }
}

/// CLI-level overrides applied on top of the scenario's configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub days: Option<usize>,
    pub t_f: Option<usize>,
    pub eps: Option<f64>,
    pub sigma: Option<f64>,
    pub gamma0: Option<f64>,
    pub alpha0: Option<f64>,
    /// Skip the leader loop and clear at this constant tariff.
    pub constant_gamma: Option<f64>,
    /// Cross-check each window against the centralized oracle (small
    /// instances only).
    pub oracle: bool,
}

#[derive(Debug, Clone)]
pub struct InnerTraceRowTagged {
    pub outer_k: usize,
    pub iter: usize,
    pub agent: String,
    pub residual_sq: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct WindowResult {
    pub gamma: TariffMatrix,
    /// Consensus trades per canonical pair over the window.
    pub trades: BTreeMap<PairId, Vec<f64>>,
    /// Net energy traded per hub per step (own frame, imports positive).
    pub net_hub_trades: Vec<Vec<f64>>,
    pub losses: BTreeMap<usize, Vec<f64>>,
    pub losses_nt: BTreeMap<usize, Vec<f64>>,
    pub j_nt: Vec<f64>,
    /// Hub cost at zero bilateral prices, tariffs included.
    pub j_base: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub total_trades_kwh: f64,
    /// Dispatch-only system cost: hub energy costs plus network imports,
    /// transfers excluded.
    pub system_cost: f64,
    pub hub_cost_total: f64,
    /// Network position: imports minus tariff receipts.
    pub network_cost: f64,
    pub tariff_collected: f64,
    pub baseline_system_cost: f64,
    pub baseline_network_cost: f64,
    pub inner_trace: Vec<InnerTraceRowTagged>,
    pub outer_trace: Vec<OuterTraceRow>,
    /// Relative objective gap against the centralized oracle, when enabled
    /// and small enough to run.
    pub oracle_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SettlementResult {
    /// Windows covered by this settlement.
    pub windows: (usize, usize),
    pub prices: TradePriceMatrix,
    pub report: FairnessReport,
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub windows: Vec<WindowResult>,
    pub settlements: Vec<SettlementResult>,
    pub ledger: Ledger,
}

impl RunOutputs {
    pub fn total_system_cost(&self) -> f64 {
        self.windows.iter().map(|w| w.system_cost).sum()
    }

    pub fn total_losses_kwh(&self) -> f64 {
        self.windows
            .iter()
            .map(|w| w.losses.values().flat_map(|s| s.iter()).sum::<f64>())
            .sum()
    }

    pub fn total_baseline_losses_kwh(&self) -> f64 {
        self.windows
            .iter()
            .map(|w| w.losses_nt.values().flat_map(|s| s.iter()).sum::<f64>())
            .sum()
    }
}

fn slice_cap(cap: &Cap, start: usize, len: usize) -> Cap {
    match cap {
        Cap::Const(v) => Cap::Const(*v),
        Cap::Series(s) => Cap::Series(s[start..start + len].to_vec()),
    }
}

fn window_hub(hub: &HubSpec, start: usize, len: usize) -> HubSpec {
    let mut out = hub.clone();
    out.l_p = hub.l_p[start..start + len].to_vec();
    out.l_q = hub.l_q[start..start + len].to_vec();
    out.disturbances = hub
        .disturbances
        .iter()
        .map(|d| d[start..start + len].to_vec())
        .collect();
    for dev in out.devices.iter_mut() {
        for ib in dev.u_bounds.iter_mut() {
            ib.lo = slice_cap(&ib.lo, start, len);
            ib.hi = slice_cap(&ib.hi, start, len);
        }
    }
    out
}

fn window_network(net: &NetworkSpec, start: usize, len: usize) -> NetworkSpec {
    let mut out = net.clone();
    for bus in out.buses.iter_mut() {
        bus.f_p = bus.f_p[start..start + len].to_vec();
    }
    out
}

fn window_prices(prices: &PriceSet, start: usize, len: usize) -> PriceSet {
    PriceSet {
        c_e_out: prices.c_e_out[start..start + len].to_vec(),
        c_e_in: prices.c_e_in[start..start + len].to_vec(),
        c_g_out: prices.c_g_out[start..start + len].to_vec(),
        c_mg: prices.c_mg[start..start + len].to_vec(),
    }
}

/// Retiles the scenario's data series to cover `days` daily windows, by
/// truncation or by repeating the first day.
pub fn retile_days(scenario: &Scenario, days: usize) -> Scenario {
    let mut out = scenario.clone();
    let t = scenario.horizon.t;
    let have = scenario.total_steps();
    let want = t * days;
    let tile = |s: &[f64]| -> Vec<f64> {
        (0..want).map(|i| s[i % have.min(s.len())]).collect()
    };
    for hub in out.hubs.iter_mut() {
        hub.l_p = tile(&hub.l_p);
        hub.l_q = tile(&hub.l_q);
        for d in hub.disturbances.iter_mut() {
            let src = d.clone();
            *d = (0..want).map(|i| src[i % src.len()].clone()).collect();
        }
        for dev in hub.devices.iter_mut() {
            for ib in dev.u_bounds.iter_mut() {
                for c in [&mut ib.lo, &mut ib.hi] {
                    if let Cap::Series(s) = c {
                        let src = s.clone();
                        *s = (0..want).map(|i| src[i % src.len()]).collect();
                    }
                }
            }
        }
    }
    for bus in out.network.buses.iter_mut() {
        bus.f_p = tile(&bus.f_p);
    }
    out.prices.c_e_out = tile(&scenario.prices.c_e_out);
    out.prices.c_e_in = tile(&scenario.prices.c_e_in);
    out.prices.c_g_out = tile(&scenario.prices.c_g_out);
    out.prices.c_mg = tile(&scenario.prices.c_mg);
    out.horizon.days = days;
    if out.horizon.t_f > want || want % out.horizon.t_f != 0 {
        out.horizon.t_f = want;
    }
    out
}

fn bilevel_config(scenario: &Scenario, ov: &RunOverrides) -> BilevelConfig {
    let algo = &scenario.algorithm;
    BilevelConfig {
        sigma: ov.sigma.unwrap_or(algo.sigma),
        k_max: algo.k_max,
        schedule: StepSchedule::GeometricDecade {
            a: ov.alpha0.unwrap_or(algo.alpha0),
        },
        beta: algo.beta,
        eps_inner: ov.eps.unwrap_or(algo.eps),
        w_max: algo.w_max,
        gamma0: ov.gamma0.unwrap_or(algo.gamma0),
        reg_coeff: algo.reg_coeff,
        sens_params: SensitivityParams::default(),
        ..BilevelConfig::default()
    }
}

/// Executes the full rolling-horizon pipeline for a scenario.
pub fn run(scenario_in: &Scenario, ov: &RunOverrides) -> Result<RunOutputs, RunError> {
    let mut scenario = match ov.days {
        Some(days) if days != scenario_in.horizon.days => retile_days(scenario_in, days),
        _ => scenario_in.clone(),
    };
    if let Some(tf) = ov.t_f {
        scenario.horizon.t_f = tf;
    }
    scenario.validate()?;

    let t = scenario.horizon.t;
    let days = scenario.horizon.days;
    let t_f = scenario.horizon.t_f;
    let windows_per_settlement = t_f / t;
    let num_hubs = scenario.hubs.len();
    let cfg = bilevel_config(&scenario, ov);
    let algo = &scenario.algorithm;

    // Per-window worker state, reused across windows: topology is fixed, so
    // the factorizations survive; only bounds and costs move.
    let mut hubs_now: Vec<HubSpec> = scenario
        .hubs
        .iter()
        .map(|h| window_hub(h, 0, t))
        .collect();
    let mut trading = MarketClearing::new(
        window_network(&scenario.network, 0, t),
        hubs_now.clone(),
        window_prices(&scenario.prices, 0, t),
        t,
        algo.rho,
        algo.qp_tol,
        20_000,
        true,
    )?;

    let mut gamma_prev: Option<TariffMatrix> = None;
    let mut warm_state: Option<MarketState> = None;
    let mut windows = Vec::with_capacity(days);
    let mut settlements = Vec::new();
    let mut ledger = Ledger::default();

    // Settlement accumulators.
    let mut acc_trades: BTreeMap<PairId, Vec<f64>> = BTreeMap::new();
    let mut acc_j_nt = vec![0.0; num_hubs];
    let mut acc_j_base = vec![0.0; num_hubs];
    let mut acc_first_window = 0usize;

    for day in 0..days {
        let start = day * t;
        let net_w = window_network(&scenario.network, start, t);
        let prices_w = window_prices(&scenario.prices, start, t);
        if day > 0 {
            hubs_now = scenario
                .hubs
                .iter()
                .zip(hubs_now.iter())
                .map(|(full, prev)| {
                    let mut h = window_hub(full, start, t);
                    // Storage state carries over from the previous window.
                    for (dev, prev_dev) in h.devices.iter_mut().zip(prev.devices.iter()) {
                        dev.x_init = prev_dev.x_init.clone();
                    }
                    h
                })
                .collect();
            trading.update_window(net_w.clone(), hubs_now.clone(), prices_w.clone())?;
        }

        // No-trade baseline for this window.
        let baseline = compute_no_trade_baseline(
            &net_w,
            &hubs_now,
            &prices_w,
            t,
            algo.rho,
            algo.baseline_eps,
            algo.w_max.max(2000),
            algo.qp_tol,
        )?;
        let w_nt_total: Vec<f64> = (0..t)
            .map(|tt| baseline.w_nt.values().map(|s| s[tt]).sum())
            .collect();

        // Tariff design (or fixed tariff) plus market clearing.
        let (outcome, gamma, outer_trace, inner_traces, converged, outer_iterations) =
            if let Some(g) = ov.constant_gamma {
                let gamma = TariffMatrix::uniform(num_hubs, g);
                let out = trading.run(
                    gamma.pair_values(),
                    &BTreeMap::new(),
                    warm_state.take(),
                    cfg.eps_inner,
                    cfg.w_max,
                )?;
                let trace = out.trace.clone();
                let conv = out.converged;
                (out, gamma, Vec::new(), vec![(0usize, trace)], conv, 0)
            } else {
                let bl = run_bilevel(
                    &mut trading,
                    &prices_w,
                    &w_nt_total,
                    gamma_prev.clone(),
                    gamma_prev.clone(),
                    warm_state.take(),
                    &cfg,
                )?;
                let iterations = bl.leader.k + 1;
                (
                    bl.clearing,
                    bl.gamma_star,
                    bl.leader.history,
                    bl.inner_traces,
                    bl.converged,
                    iterations,
                )
            };

        // Window bookkeeping.
        let empty_c: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let empty_g: BTreeMap<usize, f64> = BTreeMap::new();
        let mut j_base = Vec::with_capacity(num_hubs);
        let mut energy_cost_total = 0.0;
        for (i, dec) in outcome.hub_decisions.iter().enumerate() {
            let gamma_row: BTreeMap<usize, f64> = (0..num_hubs)
                .filter(|&j| j != i)
                .map(|j| (j, gamma.get(i, j)))
                .collect();
            j_base.push(hub_cost(dec, &prices_w, &empty_c, &gamma_row));
            energy_cost_total += hub_cost(dec, &prices_w, &empty_c, &empty_g);
        }
        let import_cost: f64 = outcome
            .network_decision
            .p_mg
            .values()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(tt, p)| prices_w.c_mg[tt] * p)
                    .sum::<f64>()
            })
            .sum();
        let abs = outcome.abs_trades();
        let tariff_collected: f64 = 2.0
            * abs
                .iter()
                .map(|(&p, &a)| gamma.get(p.0, p.1) * a)
                .sum::<f64>();
        let total_trades_kwh: f64 = abs.values().sum();
        let net_hub_trades: Vec<Vec<f64>> = (0..num_hubs)
            .map(|i| {
                (0..t)
                    .map(|tt| {
                        outcome.hub_decisions[i]
                            .p_tr
                            .values()
                            .map(|s| s[tt])
                            .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        let baseline_import: f64 = baseline.network_cost;
        let oracle_gap = if ov.oracle && num_hubs <= 3 && scenario.network.buses.len() <= 4 && t <= 6
        {
            let central = centralized_clearing(
                &net_w,
                &hubs_now,
                &prices_w,
                t,
                gamma.pair_values(),
                true,
                1e-9,
                100_000,
            )
            .ok();
            central.map(|c| {
                let dispatch_cost = energy_cost_total + import_cost;
                (dispatch_cost - c.objective).abs() / c.objective.abs().max(1.0)
            })
        } else {
            None
        };

        let window = WindowResult {
            gamma: gamma.clone(),
            trades: outcome.trades.clone(),
            net_hub_trades,
            losses: outcome.network_decision.w.clone(),
            losses_nt: baseline.w_nt.clone(),
            j_nt: baseline.j_nt.clone(),
            j_base: j_base.clone(),
            converged,
            outer_iterations,
            total_trades_kwh,
            system_cost: energy_cost_total + import_cost,
            hub_cost_total: j_base.iter().sum(),
            network_cost: import_cost - tariff_collected,
            tariff_collected,
            baseline_system_cost: baseline.j_nt.iter().sum::<f64>() + baseline.network_cost,
            baseline_network_cost: baseline_import,
            inner_trace: inner_traces
                .iter()
                .flat_map(|(k, rows)| {
                    rows.iter().map(move |r| InnerTraceRowTagged {
                        outer_k: *k,
                        iter: r.iter,
                        agent: r.agent.clone(),
                        residual_sq: r.residual_sq,
                        objective: r.objective,
                    })
                })
                .collect(),
            outer_trace,
            oracle_gap,
        };

        // Settle this window's tariff payments with the network.
        let zero_prices = TradePriceMatrix::zeros(num_hubs, t);
        ledger.extend(settle(&outcome.trades, &zero_prices, &gamma, day));

        // Accumulate for the trade-price settlement.
        for (&p, series) in &outcome.trades {
            acc_trades
                .entry(p)
                .or_insert_with(Vec::new)
                .extend_from_slice(series);
        }
        for i in 0..num_hubs {
            acc_j_nt[i] += baseline.j_nt[i];
            acc_j_base[i] += j_base[i];
        }

        // Warm starts and storage chaining for the next window.
        gamma_prev = Some(gamma);
        warm_state = Some(outcome.state.clone());
        for (i, dec) in outcome.hub_decisions.iter().enumerate() {
            for (d, dev_x) in dec.x.iter().enumerate() {
                if !dev_x.is_empty() {
                    let x_final: Vec<f64> = dev_x.iter().map(|series| series[t]).collect();
                    hubs_now[i].devices[d].x_init = Some(x_final);
                }
            }
        }
        windows.push(window);

        // Trade-price settlement at the period boundary.
        if (day + 1) % windows_per_settlement == 0 {
            let fair_cfg = FairPricingConfig {
                beta1: algo.fair.beta1,
                tol: algo.fair.tol,
                max_iter: algo.fair.max_iter,
                cap: algo.fair.cap,
                per_step: algo.fair.per_step,
            };
            let inputs = FairPricingInputs {
                num_hubs,
                trades: &acc_trades,
                j_nt: &acc_j_nt,
                j_base: &acc_j_base,
            };
            let (prices, report) = if ov.oracle {
                solve_fair_prices_centralized(&inputs, &fair_cfg)?
            } else {
                solve_fair_prices(&inputs, &fair_cfg)?
            };
            let zero_gamma = TariffMatrix::zeros(num_hubs);
            ledger.extend(settle(&acc_trades, &prices, &zero_gamma, acc_first_window));
            settlements.push(SettlementResult {
                windows: (acc_first_window, day),
                prices,
                report,
            });
            acc_trades.clear();
            acc_j_nt.iter_mut().for_each(|v| *v = 0.0);
            acc_j_base.iter_mut().for_each(|v| *v = 0.0);
            acc_first_window = day + 1;
        }
    }

    Ok(RunOutputs {
        windows,
        settlements,
        ledger,
    })
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub label: String,
    pub hub_cost_reduction_pct: f64,
    pub network_cost_reduction_pct: f64,
    pub loss_reduction_pct: f64,
    pub total_trades_kwh: f64,
    pub tariff_collected: f64,
    pub system_cost: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,hub_cost_reduction_pct,network_cost_reduction_pct,loss_reduction_pct,total_trades_kwh,tariff_collected,system_cost\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.hub_cost_reduction_pct,
                r.network_cost_reduction_pct,
                r.loss_reduction_pct,
                r.total_trades_kwh,
                r.tariff_collected,
                r.system_cost
            ));
        }
        out
    }
}

fn summarize(label: &str, out: &RunOutputs) -> ComparisonRow {
    let hub_cost: f64 = out.windows.iter().map(|w| w.hub_cost_total).sum();
    let hub_cost_nt: f64 = out
        .windows
        .iter()
        .map(|w| w.j_nt.iter().sum::<f64>())
        .sum();
    let net_cost: f64 = out.windows.iter().map(|w| w.network_cost).sum();
    let net_cost_nt: f64 = out.windows.iter().map(|w| w.baseline_network_cost).sum();
    let losses = out.total_losses_kwh();
    let losses_nt = out.total_baseline_losses_kwh();
    ComparisonRow {
        label: label.into(),
        hub_cost_reduction_pct: 100.0 * (hub_cost_nt - hub_cost) / hub_cost_nt.abs().max(1e-9),
        network_cost_reduction_pct: 100.0 * (net_cost_nt - net_cost)
            / net_cost_nt.abs().max(1e-9),
        loss_reduction_pct: 100.0 * (losses_nt - losses) / losses_nt.abs().max(1e-9),
        total_trades_kwh: out.windows.iter().map(|w| w.total_trades_kwh).sum(),
        tariff_collected: out.windows.iter().map(|w| w.tariff_collected).sum(),
        system_cost: out.total_system_cost(),
    }
}

/// Runs the tariff-designing case plus one constant-tariff case per entry of
/// `gammas` on identical data and tabulates the comparison quantities.
pub fn compare(
    scenario: &Scenario,
    gammas: &[f64],
    ov: &RunOverrides,
) -> Result<ComparisonTable, RunError> {
    let mut rows = Vec::new();
    let optimal = run(scenario, ov)?;
    rows.push(summarize("optimal", &optimal));
    for &g in gammas {
        let mut o = ov.clone();
        o.constant_gamma = Some(g);
        let out = run(scenario, &o)?;
        rows.push(summarize(&format!("gamma={g}"), &out));
    }
    Ok(ComparisonTable { rows })
}

#[cfg(test)]
mod tests;
