//! Leader loop: tariff design by projected hypergradient descent.
//!
//! Each outer iteration clears the market at the current tariff, computes
//! per-hub trade sensitivities, assembles the hypergradient, takes a
//! projected step onto the tariff constraint set (nonnegative, symmetric by
//! parameterization, loss-recovering), and repeats until the collected
//! tariff stabilizes while recovery holds, or the iteration cap ends the
//! loop with a fallback tariff.

use std::collections::BTreeMap;

use crate::admm::{AdmmError, ClearingOutcome, InnerTraceRow, MarketClearing, MarketState, PairId};
use crate::model::PriceSet;
use crate::qp::{solve_qp, CscMatrix, QPProblem, QpError, SolveStatus};
use crate::sensitivity::{
    compute_hub_sensitivity, finite_difference_column, sign_pattern, HubSensitivity,
    SensitivityError, SensitivityParams,
};

/// Symmetric nonnegative per-pair trading tariffs with a zero diagonal,
/// constant over the horizon, parameterized by unordered pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TariffMatrix {
    num_hubs: usize,
    gamma: BTreeMap<PairId, f64>,
}

impl TariffMatrix {
    pub fn uniform(num_hubs: usize, value: f64) -> Self {
        assert!(value >= 0.0, "tariffs are nonnegative");
        let gamma = crate::admm::all_pairs(num_hubs)
            .into_iter()
            .map(|p| (p, value))
            .collect();
        TariffMatrix { num_hubs, gamma }
    }

    pub fn zeros(num_hubs: usize) -> Self {
        Self::uniform(num_hubs, 0.0)
    }

    pub fn from_pairs(num_hubs: usize, values: &BTreeMap<PairId, f64>) -> Self {
        let mut m = Self::zeros(num_hubs);
        for (&p, &v) in values {
            m.set(p.0, p.1, v);
        }
        m
    }

    pub fn num_hubs(&self) -> usize {
        self.num_hubs
    }

    /// Symmetric lookup; the diagonal is zero.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.gamma[&crate::admm::pair_id(i, j)]
        }
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(i != j, "diagonal tariffs are identically zero");
        assert!(value >= 0.0, "tariffs are nonnegative");
        self.gamma.insert(crate::admm::pair_id(i, j), value);
    }

    pub fn pair_values(&self) -> &BTreeMap<PairId, f64> {
        &self.gamma
    }

    pub fn pairs(&self) -> Vec<PairId> {
        self.gamma.keys().copied().collect()
    }

    pub fn as_vec(&self, pairs: &[PairId]) -> Vec<f64> {
        pairs.iter().map(|p| self.gamma[p]).collect()
    }
}

/// Outer step-size schedules.
#[derive(Debug, Clone, Copy)]
pub enum StepSchedule {
    /// `alpha_k = a * 0.1^(k / 10)` with integer division, the reported
    /// experimental choice. Geometric, hence summable.
    GeometricDecade { a: f64 },
    /// `alpha_k = a / (k + 1)`: non-summable, square-summable.
    Harmonic { a: f64 },
}

impl StepSchedule {
    pub fn alpha(&self, k: usize) -> f64 {
        match self {
            StepSchedule::GeometricDecade { a } => a * 0.1_f64.powi((k / 10) as i32),
            StepSchedule::Harmonic { a } => a / (k as f64 + 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OuterTraceRow {
    pub k: usize,
    /// Leader objective over ordered pairs at the current iterate.
    pub j_value: f64,
    /// Collected tariff over unordered pairs.
    pub collected_tariff: f64,
    /// Cost of losses beyond the no-trade baseline.
    pub loss_gap: f64,
    /// collected - loss_gap; nonnegative when recovery holds.
    pub recovery_gap: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct LeaderState {
    pub gamma: TariffMatrix,
    pub k: usize,
    pub alpha_k: f64,
    pub beta_k: f64,
    pub history: Vec<OuterTraceRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum BilevelError {
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("tariff projection is infeasible and no fallback tariff is available")]
    ProjectionInfeasible,
}

/// Hypergradient of the leader objective per unordered pair:
/// `reg_coeff * gamma_m + sum_t |p*_m,t| + s_gamma_col_m' (gamma ⊙ sgn p*)`.
pub fn hypergradient(
    gamma: &TariffMatrix,
    pairs: &[PairId],
    consensus_trades: &BTreeMap<PairId, Vec<f64>>,
    hub_trades: &[BTreeMap<usize, Vec<f64>>],
    sens: &BTreeMap<usize, HubSensitivity>,
    zero_tol: f64,
    reg_coeff: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(pairs.len());
    for (m_idx, &m) in pairs.iter().enumerate() {
        let gamma_m = gamma.get(m.0, m.1);
        let abs_sum: f64 = consensus_trades
            .get(&m)
            .map(|s| s.iter().map(|v| v.abs()).sum())
            .unwrap_or(0.0);
        let mut chain = 0.0;
        for (i, block) in sens {
            let own = &hub_trades[*i];
            for (row_idx, &(j, t)) in block.rows.iter().enumerate() {
                let p = own.get(&j).map(|s| s[t]).unwrap_or(0.0);
                let sgn = if p > zero_tol {
                    1.0
                } else if p < -zero_tol {
                    -1.0
                } else {
                    0.0
                };
                if sgn != 0.0 {
                    let g_row = gamma.get(*i, j);
                    chain += block.matrix[row_idx][m_idx] * g_row * sgn;
                }
            }
        }
        grad.push(reg_coeff * gamma_m + abs_sum + chain);
    }
    grad
}

/// Least-squares projection onto the tariff constraint set: nonnegative
/// components whose collected tariff against the frozen trade magnitudes
/// covers the loss gap. Symmetry and the zero diagonal are structural in
/// the unordered-pair parameterization.
pub fn project_tariffs(
    gamma_hat: &[f64],
    abs_trades: &[f64],
    loss_gap: f64,
) -> Result<Vec<f64>, BilevelError> {
    assert_eq!(gamma_hat.len(), abs_trades.len());
    let clipped: Vec<f64> = gamma_hat.iter().map(|&v| v.max(0.0)).collect();
    if loss_gap <= 0.0 {
        return Ok(clipped);
    }
    let collected: f64 = clipped
        .iter()
        .zip(abs_trades)
        .map(|(g, a)| g * a)
        .sum();
    if collected >= loss_gap {
        return Ok(clipped);
    }
    if abs_trades.iter().all(|&a| a <= 0.0) {
        return Err(BilevelError::ProjectionInfeasible);
    }
    let n = gamma_hat.len();
    let p = {
        let t: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 2.0)).collect();
        CscMatrix::from_triplets(n, n, &t)
    };
    let q: Vec<f64> = gamma_hat.iter().map(|&v| -2.0 * v).collect();
    let mut g_trip = Vec::with_capacity(2 * n);
    let mut h = Vec::with_capacity(n + 1);
    for (i, &a) in abs_trades.iter().enumerate() {
        g_trip.push((0, i, -a));
    }
    h.push(-loss_gap);
    for i in 0..n {
        g_trip.push((i + 1, i, -1.0));
        h.push(0.0);
    }
    let prob = QPProblem::new(
        p,
        q,
        CscMatrix::from_triplets(n + 1, n, &g_trip),
        h,
        CscMatrix::zeros(0, n),
        vec![],
    );
    let sol = solve_qp(&prob, 1e-9, 50_000, None)?;
    if sol.status != SolveStatus::Optimal {
        return Err(BilevelError::ProjectionInfeasible);
    }
    Ok(sol.x.iter().map(|&v| v.max(0.0)).collect())
}

#[derive(Debug, Clone)]
pub struct BilevelConfig {
    pub sigma: f64,
    pub k_max: usize,
    pub schedule: StepSchedule,
    pub beta: f64,
    pub eps_inner: f64,
    pub w_max: usize,
    pub gamma0: f64,
    /// Coefficient of the tariff regularizer in the hypergradient; the
    /// printed equation carries 4, the naive derivative 2.
    pub reg_coeff: f64,
    pub sens_params: SensitivityParams,
    /// Step of the finite-difference fallback for degenerate hubs.
    pub fd_step: f64,
    /// Loss gaps below this magnitude are solver noise and treated as zero.
    pub gap_floor: f64,
    /// Trade magnitudes below this are treated as zero in the projection.
    pub trade_floor: f64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            sigma: 0.2,
            k_max: 30,
            schedule: StepSchedule::GeometricDecade { a: 2e-6 },
            beta: 1.0,
            eps_inner: 0.2,
            w_max: 100,
            gamma0: 0.01,
            reg_coeff: 4.0,
            sens_params: SensitivityParams::default(),
            fd_step: 1e-5,
            gap_floor: 1e-6,
            trade_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BilevelOutcome {
    pub gamma_star: TariffMatrix,
    pub clearing: ClearingOutcome,
    pub leader: LeaderState,
    pub converged: bool,
    pub used_fallback: bool,
    /// Inner-loop traces per outer iteration.
    pub inner_traces: Vec<(usize, Vec<InnerTraceRow>)>,
}

fn collected_tariff(gamma: &TariffMatrix, abs: &BTreeMap<PairId, f64>) -> f64 {
    abs.iter().map(|(&p, &a)| gamma.get(p.0, p.1) * a).sum()
}

fn loss_gap(prices: &PriceSet, w_total: &[f64], w_nt_total: &[f64]) -> f64 {
    w_total
        .iter()
        .zip(w_nt_total)
        .zip(prices.c_e_out.iter())
        .map(|((w, wnt), c)| c * (w - wnt))
        .sum()
}

/// Per-hub sensitivities at the final consensus state. Hubs that fail the
/// strict-complementarity screen fall back to central finite differences on
/// their own subproblem.
fn sensitivities_at_state(
    clearing: &mut MarketClearing,
    gamma: &TariffMatrix,
    trade_prices: &BTreeMap<PairId, Vec<f64>>,
    state: &MarketState,
    pairs: &[PairId],
    cfg: &BilevelConfig,
) -> Result<(BTreeMap<usize, HubSensitivity>, Vec<BTreeMap<usize, Vec<f64>>>), BilevelError> {
    let anchor = clearing.resolve_at_state(gamma.pair_values(), trade_prices, state)?;
    let num_hubs = clearing.num_hubs();
    let mut blocks = BTreeMap::new();
    let mut hub_trades = Vec::with_capacity(num_hubs);
    for i in 0..num_hubs {
        let (dec, sol) = &anchor[i];
        hub_trades.push(dec.p_tr.clone());
        let (x, lam) = clearing.hub_agents()[i].unsplit_view(sol);
        let signs = sign_pattern(&dec.p_tr, cfg.sens_params.zero_trade_tol);
        let block = compute_hub_sensitivity(
            i,
            clearing.hub_agents()[i].system(),
            &x,
            &lam,
            clearing.hub_agents()[i].rho(),
            &signs,
            pairs,
            &cfg.sens_params,
        );
        match block {
            Ok(b) if b.strict_complementarity => {
                blocks.insert(i, b);
            }
            _ => {
                // Degenerate duals: differentiate the subproblem numerically.
                let rows: Vec<(usize, usize)> = {
                    let mut r = Vec::new();
                    for (&j, series) in &dec.p_tr {
                        for t in 0..series.len() {
                            r.push((j, t));
                        }
                    }
                    r
                };
                let mut matrix = vec![vec![0.0; pairs.len()]; rows.len()];
                for (m_idx, &m) in pairs.iter().enumerate() {
                    if m.0 != i && m.1 != i {
                        continue;
                    }
                    let col = finite_difference_column(
                        |delta: f64| {
                            clearing
                                .resolve_one_perturbed(
                                    i,
                                    gamma.pair_values(),
                                    trade_prices,
                                    state,
                                    m,
                                    delta,
                                )
                                .ok()
                                .map(|(d, _)| d.p_tr)
                        },
                        m,
                        cfg.fd_step,
                        &rows,
                    )?;
                    for (ri, v) in col.into_iter().enumerate() {
                        matrix[ri][m_idx] = v;
                    }
                }
                blocks.insert(
                    i,
                    HubSensitivity {
                        rows,
                        cols: pairs.to_vec(),
                        matrix,
                        strict_complementarity: false,
                        max_residual: f64::NAN,
                        degenerate: true,
                    },
                );
            }
        }
    }
    Ok((blocks, hub_trades))
}

/// Full leader loop over one horizon window.
///
/// Clears the market at the current tariff, steps along the projected
/// hypergradient, and stops when the collected tariff changes by at most
/// `sigma` while recovery holds at the current iterate. If the cap is
/// reached or the projection turns infeasible the fallback tariff (previous
/// window's result, else the uniform initialization) is applied and the
/// market cleared once more under it.
pub fn run_bilevel(
    clearing: &mut MarketClearing,
    prices: &PriceSet,
    w_nt_total: &[f64],
    gamma_init: Option<TariffMatrix>,
    fallback: Option<TariffMatrix>,
    warm_state: Option<MarketState>,
    cfg: &BilevelConfig,
) -> Result<BilevelOutcome, BilevelError> {
    let num_hubs = clearing.num_hubs();
    let pairs = clearing.pairs().to_vec();
    let horizon = clearing.horizon;
    let no_prices: BTreeMap<PairId, Vec<f64>> = BTreeMap::new();

    let mut gamma = gamma_init.unwrap_or_else(|| TariffMatrix::uniform(num_hubs, cfg.gamma0));
    let fallback_gamma =
        fallback.unwrap_or_else(|| TariffMatrix::uniform(num_hubs, cfg.gamma0));
    let mut warm = warm_state;
    let mut history: Vec<OuterTraceRow> = Vec::new();
    let mut prev_abs: Option<BTreeMap<PairId, f64>> = None;
    let mut last: Option<ClearingOutcome> = None;
    let mut inner_traces: Vec<(usize, Vec<InnerTraceRow>)> = Vec::new();
    let mut converged = false;
    let mut used_fallback = false;
    let mut k_final = 0usize;
    let mut alpha_final = cfg.schedule.alpha(0);

    for k in 0..cfg.k_max {
        k_final = k;
        let alpha = cfg.schedule.alpha(k);
        alpha_final = alpha;
        let outcome = clearing.run(
            gamma.pair_values(),
            &no_prices,
            warm.take(),
            cfg.eps_inner,
            cfg.w_max,
        )?;
        inner_traces.push((k, outcome.trace.clone()));
        let abs = outcome.abs_trades();
        let w_total: Vec<f64> = (0..horizon)
            .map(|t| outcome.network_decision.total_loss_kw(t))
            .collect();
        let gap_raw = loss_gap(prices, &w_total, w_nt_total);
        let gap = if gap_raw.abs() <= cfg.gap_floor {
            0.0
        } else {
            gap_raw
        };
        let collected = collected_tariff(&gamma, &abs);
        let j_value: f64 = 2.0
            * pairs
                .iter()
                .map(|&p| {
                    let g = gamma.get(p.0, p.1);
                    g * abs[&p] + horizon as f64 * g * g
                })
                .sum::<f64>();
        history.push(OuterTraceRow {
            k,
            j_value,
            collected_tariff: collected,
            loss_gap: gap,
            recovery_gap: collected - gap,
            alpha,
        });

        if let Some(prev) = &prev_abs {
            let change: f64 = pairs
                .iter()
                .map(|&p| gamma.get(p.0, p.1) * (abs[&p] - prev[&p]))
                .sum();
            if change.abs() <= cfg.sigma && gap <= collected {
                converged = true;
                last = Some(outcome);
                break;
            }
        }

        let (blocks, hub_trades) = sensitivities_at_state(
            clearing,
            &gamma,
            &no_prices,
            &outcome.state,
            &pairs,
            cfg,
        )?;
        let grad = hypergradient(
            &gamma,
            &pairs,
            &outcome.trades,
            &hub_trades,
            &blocks,
            cfg.sens_params.zero_trade_tol,
            cfg.reg_coeff,
        );
        let gamma_vec = gamma.as_vec(&pairs);
        let hat: Vec<f64> = gamma_vec
            .iter()
            .zip(grad.iter())
            .map(|(g, d)| g - alpha * d)
            .collect();
        let abs_vec: Vec<f64> = pairs
            .iter()
            .map(|p| {
                let a = abs[p];
                if a < cfg.trade_floor {
                    0.0
                } else {
                    a
                }
            })
            .collect();
        let projected = match project_tariffs(&hat, &abs_vec, gap) {
            Ok(p) => p,
            Err(BilevelError::ProjectionInfeasible) => {
                used_fallback = true;
                gamma = fallback_gamma.clone();
                warm = Some(outcome.state.clone());
                last = Some(outcome);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut next = gamma.clone();
        for (idx, &p) in pairs.iter().enumerate() {
            let stepped = gamma_vec[idx] + cfg.beta * (projected[idx] - gamma_vec[idx]);
            next.set(p.0, p.1, stepped.max(0.0));
        }
        gamma = next;
        warm = Some(outcome.state.clone());
        prev_abs = Some(abs);
        last = Some(outcome);
    }

    if !converged && !used_fallback {
        // Iteration cap: apply the fallback tariff.
        used_fallback = true;
        gamma = fallback_gamma.clone();
    }
    let final_outcome = if converged {
        last.expect("outcome recorded on convergence")
    } else {
        // Re-clear once under the applied tariff for consistent outputs.
        let warm_for_final = last.map(|o| o.state);
        let out = clearing.run(
            gamma.pair_values(),
            &no_prices,
            warm_for_final,
            cfg.eps_inner,
            cfg.w_max,
        )?;
        inner_traces.push((k_final + 1, out.trace.clone()));
        out
    };

    Ok(BilevelOutcome {
        gamma_star: gamma.clone(),
        clearing: final_outcome,
        leader: LeaderState {
            gamma,
            k: k_final,
            alpha_k: alpha_final,
            beta_k: cfg.beta,
            history,
        },
        converged,
        used_fallback,
        inner_traces,
    })
}

#[cfg(test)]
mod tests;
