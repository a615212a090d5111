//! Distributed consensus-ADMM market clearing.
//!
//! Every unordered hub pair owns one canonical trade variable, oriented so
//! that the lower-indexed hub's import is positive; the higher-indexed hub's
//! local copy enters negated. This enforces trade reciprocity exactly at
//! every iteration and halves the consensus variables. Each participant
//! additionally keeps a local copy of its net injection, shared with the
//! network operator.
//!
//! Per iteration the hub subproblems and the network subproblem are solved
//! against an immutable snapshot of the consensus state (in parallel), then
//! the coordinator averages local copies into the consensus variables and
//! performs the dual ascent step. The loop stops when every agent's squared
//! primal residual is at or below the tolerance, or at the iteration cap.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::grid_opt::{GridOptError, NetworkAgent};
use crate::hub_opt::{HubAgent, HubOptError};
use crate::model::{HubDecision, HubSpec, NetworkDecision, NetworkSpec, PriceSet};
use crate::qp::QPSolution;

/// Unordered hub pair, stored with the lower index first.
pub type PairId = (usize, usize);

pub fn pair_id(i: usize, j: usize) -> PairId {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// All unordered pairs of `n` hubs, lexicographic.
pub fn all_pairs(n: usize) -> Vec<PairId> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push((i, j));
        }
    }
    out
}

/// Owner tag of an injection dual: the hub itself or the network operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Owner {
    Hub,
    Network,
}

/// Consensus variables, duals and bookkeeping of one clearing run.
#[derive(Debug, Clone, Default)]
pub struct MarketState {
    /// Consensus trades per canonical pair.
    pub z_tr: BTreeMap<PairId, Vec<f64>>,
    /// Consensus injections per hub.
    pub z_net: BTreeMap<usize, Vec<f64>>,
    /// Trade duals, one per (pair, owning hub).
    pub lam: BTreeMap<(PairId, usize), Vec<f64>>,
    /// Injection duals, one per (hub, owner side).
    pub mu: BTreeMap<(usize, Owner), Vec<f64>>,
    pub iter: usize,
    /// Squared primal residual per agent at the last iteration.
    pub residuals: BTreeMap<String, f64>,
}

impl MarketState {
    pub fn zeros(num_hubs: usize, pairs: &[PairId], horizon: usize) -> Self {
        let mut state = MarketState::default();
        for &p in pairs {
            state.z_tr.insert(p, vec![0.0; horizon]);
            state.lam.insert((p, p.0), vec![0.0; horizon]);
            state.lam.insert((p, p.1), vec![0.0; horizon]);
        }
        for h in 0..num_hubs {
            state.z_net.insert(h, vec![0.0; horizon]);
            state.mu.insert((h, Owner::Hub), vec![0.0; horizon]);
            state.mu.insert((h, Owner::Network), vec![0.0; horizon]);
        }
        state
    }

    pub fn is_finite(&self) -> bool {
        self.z_tr
            .values()
            .chain(self.z_net.values())
            .chain(self.lam.values())
            .chain(self.mu.values())
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Local copies of the coupled variables gathered after one solve round,
/// all in the canonical frame.
pub struct LocalCopies {
    /// Per pair: copy held by the lower hub, copy held by the higher hub.
    pub trades: BTreeMap<PairId, (Vec<f64>, Vec<f64>)>,
    /// Per hub: (hub-side copy, network-side copy).
    pub injections: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

/// Averages both owners' copies into new consensus values.
pub fn consensus_update(copies: &LocalCopies) -> (BTreeMap<PairId, Vec<f64>>, BTreeMap<usize, Vec<f64>>) {
    let z_tr = copies
        .trades
        .iter()
        .map(|(&p, (a, b))| {
            let z: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
            (p, z)
        })
        .collect();
    let z_net = copies
        .injections
        .iter()
        .map(|(&h, (a, b))| {
            let z: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
            (h, z)
        })
        .collect();
    (z_tr, z_net)
}

/// Dual ascent: every dual moves by `rho * (local copy - consensus)`.
/// Call after [`consensus_update`] has refreshed `z`.
pub fn dual_update(state: &mut MarketState, copies: &LocalCopies, rho: f64) {
    for (&p, (lo, hi)) in &copies.trades {
        let z = &state.z_tr[&p];
        let lam_lo = state.lam.get_mut(&(p, p.0)).expect("dual exists");
        for t in 0..z.len() {
            lam_lo[t] += rho * (lo[t] - z[t]);
        }
        let lam_hi = state.lam.get_mut(&(p, p.1)).expect("dual exists");
        for t in 0..z.len() {
            lam_hi[t] += rho * (hi[t] - z[t]);
        }
    }
    for (&h, (hub_copy, net_copy)) in &copies.injections {
        let z = &state.z_net[&h];
        let mu_h = state.mu.get_mut(&(h, Owner::Hub)).expect("dual exists");
        for t in 0..z.len() {
            mu_h[t] += rho * (hub_copy[t] - z[t]);
        }
        let mu_n = state.mu.get_mut(&(h, Owner::Network)).expect("dual exists");
        for t in 0..z.len() {
            mu_n[t] += rho * (net_copy[t] - z[t]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct InnerTraceRow {
    pub iter: usize,
    pub agent: String,
    pub residual_sq: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct ClearingOutcome {
    /// Consensus trades per canonical pair — the market outcome.
    pub trades: BTreeMap<PairId, Vec<f64>>,
    /// Consensus injections per hub.
    pub p_net: BTreeMap<usize, Vec<f64>>,
    pub hub_decisions: Vec<HubDecision>,
    /// Raw subproblem solutions at the final iterate (duals feed the
    /// sensitivity system).
    pub hub_solutions: Vec<QPSolution>,
    pub network_decision: NetworkDecision,
    pub state: MarketState,
    pub converged: bool,
    pub iters: usize,
    pub trace: Vec<InnerTraceRow>,
}

impl ClearingOutcome {
    /// Time-summed absolute consensus trade per pair.
    pub fn abs_trades(&self) -> BTreeMap<PairId, f64> {
        self.trades
            .iter()
            .map(|(&p, s)| (p, s.iter().map(|v| v.abs()).sum()))
            .collect()
    }

    pub fn total_traded_energy(&self) -> f64 {
        self.abs_trades().values().sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AdmmError {
    #[error("hub subproblem failed: {0}")]
    Hub(#[from] HubOptError),
    #[error("network subproblem failed: {0}")]
    Network(#[from] GridOptError),
    #[error("non-finite value entered the market state at iteration {iter} (agent {agent})")]
    NonFinite { iter: usize, agent: String },
    #[error("market state dimensions do not match the clearing setup")]
    StateMismatch,
}

/// Coordinator owning the per-agent solvers for one scenario horizon.
pub struct MarketClearing {
    hub_agents: Vec<HubAgent>,
    network: NetworkAgent,
    pairs: Vec<PairId>,
    pub horizon: usize,
    rho: f64,
    trading: bool,
}

impl MarketClearing {
    /// Builds agents for every hub and the network. With `trading` false the
    /// hubs see no partners and the run reduces to grid-only exchange.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: NetworkSpec,
        hubs: Vec<HubSpec>,
        prices: PriceSet,
        horizon: usize,
        rho: f64,
        qp_tol: f64,
        qp_max_iter: usize,
        trading: bool,
    ) -> Result<Self, AdmmError> {
        let pairs = if trading {
            all_pairs(hubs.len())
        } else {
            Vec::new()
        };
        let mut hub_agents = Vec::with_capacity(hubs.len());
        for (i, hub) in hubs.iter().enumerate() {
            let partners: Vec<usize> = if trading {
                (0..hubs.len()).filter(|&j| j != i).collect()
            } else {
                Vec::new()
            };
            hub_agents.push(HubAgent::new(
                hub.clone(),
                partners,
                prices.clone(),
                rho,
                horizon,
                qp_tol,
                qp_max_iter,
            )?);
        }
        let hub_buses: Vec<usize> = hubs.iter().map(|h| h.bus).collect();
        let network = NetworkAgent::new(
            net,
            hub_buses,
            prices.c_mg.clone(),
            rho,
            horizon,
            qp_tol,
            qp_max_iter,
        )?;
        Ok(MarketClearing {
            hub_agents,
            network,
            pairs,
            horizon,
            rho,
            trading,
        })
    }

    pub fn num_hubs(&self) -> usize {
        self.hub_agents.len()
    }

    pub fn pairs(&self) -> &[PairId] {
        &self.pairs
    }

    pub fn hub_agents(&self) -> &[HubAgent] {
        &self.hub_agents
    }

    pub fn hub_agents_mut(&mut self) -> &mut [HubAgent] {
        &mut self.hub_agents
    }

    pub fn network_agent(&self) -> &NetworkAgent {
        &self.network
    }

    /// Swaps in the next horizon window (new demands/prices, same topology).
    pub fn update_window(
        &mut self,
        net: NetworkSpec,
        hubs: Vec<HubSpec>,
        prices: PriceSet,
    ) -> Result<(), AdmmError> {
        for (agent, hub) in self.hub_agents.iter_mut().zip(hubs.into_iter()) {
            agent.update_window(hub)?;
        }
        self.network.update_window(net, prices.c_mg.clone())?;
        Ok(())
    }

    fn hub_inputs(
        &self,
        i: usize,
        gamma: &BTreeMap<PairId, f64>,
        trade_prices: &BTreeMap<PairId, Vec<f64>>,
        state: &MarketState,
    ) -> (
        BTreeMap<usize, f64>,
        BTreeMap<usize, Vec<f64>>,
        BTreeMap<usize, Vec<f64>>,
        BTreeMap<usize, Vec<f64>>,
        Vec<f64>,
        Vec<f64>,
    ) {
        let mut gamma_row = BTreeMap::new();
        let mut c_row = BTreeMap::new();
        let mut z_tr = BTreeMap::new();
        let mut lam = BTreeMap::new();
        for &j in self.hub_agents[i].partners.iter() {
            let p = pair_id(i, j);
            // Canonical frame equals hub min(i,j)'s own frame; the other
            // side sees targets and duals negated.
            let sign = if i < j { 1.0 } else { -1.0 };
            gamma_row.insert(j, gamma.get(&p).copied().unwrap_or(0.0));
            let c = trade_prices
                .get(&p)
                .cloned()
                .unwrap_or_else(|| vec![0.0; self.horizon]);
            c_row.insert(j, c);
            let z: Vec<f64> = state.z_tr[&p].iter().map(|v| sign * v).collect();
            z_tr.insert(j, z);
            let l: Vec<f64> = state.lam[&(p, i)].iter().map(|v| sign * v).collect();
            lam.insert(j, l);
        }
        let z_net = state.z_net[&i].clone();
        let mu = state.mu[&(i, Owner::Hub)].clone();
        (gamma_row, c_row, z_tr, lam, z_net, mu)
    }

    /// Re-solves every hub subproblem at the given consensus state without
    /// advancing it. Anchor point for sensitivity computations.
    pub fn resolve_at_state(
        &mut self,
        gamma: &BTreeMap<PairId, f64>,
        trade_prices: &BTreeMap<PairId, Vec<f64>>,
        state: &MarketState,
    ) -> Result<Vec<(HubDecision, QPSolution)>, AdmmError> {
        let inputs: Vec<_> = (0..self.hub_agents.len())
            .map(|i| self.hub_inputs(i, gamma, trade_prices, state))
            .collect();
        let out = self
            .hub_agents
            .par_iter_mut()
            .zip(inputs.par_iter())
            .map(|(agent, (g, c, z, l, zn, mu))| agent.solve(g, c, z, l, zn, mu))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(out)
    }

    /// Re-solves one hub with a single tariff component moved by `delta`,
    /// everything else frozen. Used by the finite-difference fallback; the
    /// perturbed tariff is floored at zero since a negative tariff makes the
    /// split subproblem unbounded.
    pub fn resolve_one_perturbed(
        &mut self,
        i: usize,
        gamma: &BTreeMap<PairId, f64>,
        trade_prices: &BTreeMap<PairId, Vec<f64>>,
        state: &MarketState,
        pair: PairId,
        delta: f64,
    ) -> Result<(HubDecision, QPSolution), AdmmError> {
        let mut g = gamma.clone();
        let entry = g.entry(pair).or_insert(0.0);
        *entry = (*entry + delta).max(0.0);
        let (gr, cr, z, l, zn, mu) = self.hub_inputs(i, &g, trade_prices, state);
        let out = self.hub_agents[i].solve(&gr, &cr, &z, &l, &zn, &mu)?;
        Ok(out)
    }

    /// Runs the consensus loop until every agent's squared primal residual
    /// is at or below `eps` or `w_max` iterations have passed. Returns the
    /// consensus trades as the market outcome; on a cap hit the best iterate
    /// is returned flagged as not converged.
    pub fn run(
        &mut self,
        gamma: &BTreeMap<PairId, f64>,
        trade_prices: &BTreeMap<PairId, Vec<f64>>,
        warm: Option<MarketState>,
        eps: f64,
        w_max: usize,
    ) -> Result<ClearingOutcome, AdmmError> {
        let num_hubs = self.hub_agents.len();
        let horizon = self.horizon;
        let mut state = match warm {
            Some(s) => {
                if s.z_net.len() != num_hubs || s.z_tr.len() != self.pairs.len() {
                    return Err(AdmmError::StateMismatch);
                }
                s
            }
            None => MarketState::zeros(num_hubs, &self.pairs, horizon),
        };
        state.iter = 0;

        let mut trace = Vec::new();
        let mut converged = false;
        let mut hub_results: Vec<(HubDecision, QPSolution)> = Vec::new();
        let mut net_result: Option<(NetworkDecision, Vec<Vec<f64>>, QPSolution)> = None;

        let mut w = 0usize;
        while w < w_max {
            // Immutable snapshots of the inputs for this round.
            let inputs: Vec<_> = (0..num_hubs)
                .map(|i| self.hub_inputs(i, gamma, trade_prices, &state))
                .collect();
            let z_net_vec: Vec<Vec<f64>> = (0..num_hubs).map(|h| state.z_net[&h].clone()).collect();
            let mu_net_vec: Vec<Vec<f64>> =
                (0..num_hubs).map(|h| state.mu[&(h, Owner::Network)].clone()).collect();

            // Hub solves and the network solve run concurrently; the
            // coordinator is the only writer of the state afterwards.
            let network = &mut self.network;
            let (hub_out, net_out) = rayon::join(
                || {
                    self.hub_agents
                        .par_iter_mut()
                        .zip(inputs.par_iter())
                        .map(|(agent, (g, c, z, l, zn, mu))| agent.solve(g, c, z, l, zn, mu))
                        .collect::<Result<Vec<_>, _>>()
                },
                || network.solve(&z_net_vec, &mu_net_vec),
            );
            hub_results = hub_out?;
            let net_solved = net_out?;

            for (i, (dec, _)) in hub_results.iter().enumerate() {
                if dec.p_net.iter().any(|v| !v.is_finite()) {
                    return Err(AdmmError::NonFinite {
                        iter: w,
                        agent: self.hub_agents[i].hub.id.clone(),
                    });
                }
            }
            if net_solved.1.iter().flatten().any(|v| !v.is_finite()) {
                return Err(AdmmError::NonFinite {
                    iter: w,
                    agent: "network".into(),
                });
            }

            // Gather local copies in the canonical frame.
            let mut trades = BTreeMap::new();
            for &p in &self.pairs {
                let (i, j) = p;
                let lo = hub_results[i].0.p_tr[&j].clone();
                let hi: Vec<f64> = hub_results[j].0.p_tr[&i].iter().map(|v| -v).collect();
                trades.insert(p, (lo, hi));
            }
            let mut injections = BTreeMap::new();
            for h in 0..num_hubs {
                injections.insert(
                    h,
                    (hub_results[h].0.p_net.clone(), net_solved.1[h].clone()),
                );
            }
            let copies = LocalCopies { trades, injections };

            let (z_tr, z_net) = consensus_update(&copies);
            // Consensus drift (scaled dual residual): with agreeing copies the
            // primal residual is identically zero even while z still moves,
            // so termination additionally requires the drift to settle.
            let mut drift_sq = 0.0;
            for (p, znew) in &z_tr {
                let zold = &state.z_tr[p];
                for t in 0..horizon {
                    let d = self.rho * (znew[t] - zold[t]);
                    drift_sq += d * d;
                }
            }
            for (h, znew) in &z_net {
                let zold = &state.z_net[h];
                for t in 0..horizon {
                    let d = self.rho * (znew[t] - zold[t]);
                    drift_sq += d * d;
                }
            }
            state.z_tr = z_tr;
            state.z_net = z_net;
            dual_update(&mut state, &copies, self.rho);
            if !state.is_finite() {
                return Err(AdmmError::NonFinite {
                    iter: w,
                    agent: "consensus".into(),
                });
            }

            // Squared primal residuals against the freshly updated z.
            let mut all_below = true;
            for i in 0..num_hubs {
                let mut r = 0.0;
                for &j in self.hub_agents[i].partners.iter() {
                    let p = pair_id(i, j);
                    let sign = if i < j { 1.0 } else { -1.0 };
                    let own_copy = &hub_results[i].0.p_tr[&j];
                    for t in 0..horizon {
                        let d = own_copy[t] - sign * state.z_tr[&p][t];
                        r += d * d;
                    }
                }
                for t in 0..horizon {
                    let d = hub_results[i].0.p_net[t] - state.z_net[&i][t];
                    r += d * d;
                }
                let id = self.hub_agents[i].hub.id.clone();
                trace.push(InnerTraceRow {
                    iter: w,
                    agent: id.clone(),
                    residual_sq: r,
                    objective: hub_results[i].1.obj,
                });
                state.residuals.insert(id, r);
                if r > eps {
                    all_below = false;
                }
            }
            let mut r_net = 0.0;
            for h in 0..num_hubs {
                for t in 0..horizon {
                    let d = net_solved.1[h][t] - state.z_net[&h][t];
                    r_net += d * d;
                }
            }
            trace.push(InnerTraceRow {
                iter: w,
                agent: "network".into(),
                residual_sq: r_net,
                objective: net_solved.2.obj,
            });
            state.residuals.insert("network".into(), r_net);
            if r_net > eps {
                all_below = false;
            }
            trace.push(InnerTraceRow {
                iter: w,
                agent: "consensus-drift".into(),
                residual_sq: drift_sq,
                objective: 0.0,
            });
            state.residuals.insert("consensus-drift".into(), drift_sq);
            if drift_sq > eps {
                all_below = false;
            }

            net_result = Some(net_solved);
            w += 1;
            state.iter = w;
            if all_below {
                converged = true;
                break;
            }
        }

        let (network_decision, _, net_solution) = net_result.expect("at least one iteration");
        let _ = net_solution;
        let (hub_decisions, hub_solutions): (Vec<_>, Vec<_>) = hub_results.into_iter().unzip();
        Ok(ClearingOutcome {
            trades: state.z_tr.clone(),
            p_net: state.z_net.clone(),
            hub_decisions,
            hub_solutions,
            network_decision,
            converged,
            iters: state.iter,
            trace,
            state,
        })
    }
}

/// One-shot market clearing for a fixed tariff matrix.
#[allow(clippy::too_many_arguments)]
pub fn run_market_clearing(
    net: &NetworkSpec,
    hubs: &[HubSpec],
    prices: &PriceSet,
    horizon: usize,
    gamma: &BTreeMap<PairId, f64>,
    trade_prices: &BTreeMap<PairId, Vec<f64>>,
    warm: Option<MarketState>,
    rho: f64,
    eps: f64,
    w_max: usize,
    qp_tol: f64,
) -> Result<ClearingOutcome, AdmmError> {
    let mut clearing = MarketClearing::new(
        net.clone(),
        hubs.to_vec(),
        prices.clone(),
        horizon,
        rho,
        qp_tol,
        20_000,
        true,
    )?;
    clearing.run(gamma, trade_prices, warm, eps, w_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{consumer_hub, flat_prices, producer_hub, tiny_network};

    #[test]
    fn consensus_update_examples() {
        let mut trades = BTreeMap::new();
        trades.insert((0, 1), (vec![4.0], vec![4.0]));
        let mut injections = BTreeMap::new();
        injections.insert(0usize, (vec![2.0], vec![0.0]));
        let copies = LocalCopies { trades, injections };
        let (z_tr, z_net) = consensus_update(&copies);
        // Agreement is a fixed point; disagreement averages.
        assert_eq!(z_tr[&(0, 1)], vec![4.0]);
        assert_eq!(z_net[&0], vec![1.0]);
    }

    #[test]
    fn consensus_update_matches_mean_oracle() {
        let a = vec![1.5, -2.0, 0.25];
        let b = vec![-0.5, 4.0, 0.75];
        let mut trades = BTreeMap::new();
        trades.insert((0, 2), (a.clone(), b.clone()));
        let copies = LocalCopies {
            trades,
            injections: BTreeMap::new(),
        };
        let (z_tr, _) = consensus_update(&copies);
        for t in 0..3 {
            assert_eq!(z_tr[&(0, 2)][t], (a[t] + b[t]) / 2.0);
        }
    }

    #[test]
    fn dual_update_examples() {
        let pairs = [(0usize, 1usize)];
        let mut state = MarketState::zeros(2, &pairs, 1);
        state.z_tr.insert((0, 1), vec![1.0]);
        let mut trades = BTreeMap::new();
        // Hub 0's copy equals z: its dual must not move. Hub 1's copy is one
        // above z with rho = 1: its dual gains exactly one.
        trades.insert((0, 1), (vec![1.0], vec![2.0]));
        let copies = LocalCopies {
            trades,
            injections: BTreeMap::new(),
        };
        dual_update(&mut state, &copies, 1.0);
        assert_eq!(state.lam[&((0, 1), 0)], vec![0.0]);
        assert_eq!(state.lam[&((0, 1), 1)], vec![1.0]);
    }

    #[test]
    fn dual_update_matches_formula_oracle() {
        let pairs = [(0usize, 1usize)];
        let mut state = MarketState::zeros(2, &pairs, 2);
        state.z_tr.insert((0, 1), vec![0.5, -0.25]);
        state.z_net.insert(0, vec![1.0, 1.0]);
        state.z_net.insert(1, vec![0.0, 0.0]);
        let rho = 2.5;
        let lo = vec![0.75, -0.5];
        let hi = vec![0.25, 0.0];
        let hub0 = vec![1.5, 0.5];
        let net0 = vec![0.5, 1.5];
        let mut trades = BTreeMap::new();
        trades.insert((0, 1), (lo.clone(), hi.clone()));
        let mut injections = BTreeMap::new();
        injections.insert(0usize, (hub0.clone(), net0.clone()));
        injections.insert(1usize, (vec![0.0; 2], vec![0.0; 2]));
        let copies = LocalCopies { trades, injections };
        dual_update(&mut state, &copies, rho);
        for t in 0..2 {
            assert_eq!(
                state.lam[&((0, 1), 0)][t],
                rho * (lo[t] - state.z_tr[&(0, 1)][t])
            );
            assert_eq!(
                state.lam[&((0, 1), 1)][t],
                rho * (hi[t] - state.z_tr[&(0, 1)][t])
            );
            assert_eq!(
                state.mu[&(0, Owner::Hub)][t],
                rho * (hub0[t] - state.z_net[&0][t])
            );
            assert_eq!(
                state.mu[&(0, Owner::Network)][t],
                rho * (net0[t] - state.z_net[&0][t])
            );
        }
    }

    #[test]
    fn lone_hub_converges_fast_to_standalone_dispatch() {
        let horizon = 2;
        let net = tiny_network(horizon, 2);
        let hubs = vec![consumer_hub("h1", 2, vec![0.4, 0.3])];
        let prices = flat_prices(horizon);
        let mut clearing =
            MarketClearing::new(net, hubs, prices, horizon, 1.0, 1e-8, 20_000, true).unwrap();
        let outcome = clearing
            .run(&BTreeMap::new(), &BTreeMap::new(), None, 0.2, 100)
            .unwrap();
        assert!(outcome.converged);
        assert_eq!(outcome.iters, 1, "loose tolerance, small demand");

        // Tight tolerance: still converges, to the standalone dispatch.
        let mut clearing2 = MarketClearing::new(
            tiny_network(horizon, 2),
            vec![consumer_hub("h1", 2, vec![0.4, 0.3])],
            flat_prices(horizon),
            horizon,
            1.0,
            1e-10,
            40_000,
            true,
        )
        .unwrap();
        let tight = clearing2
            .run(&BTreeMap::new(), &BTreeMap::new(), None, 1e-12, 3000)
            .unwrap();
        assert!(tight.converged);
        for t in 0..horizon {
            let expected = [0.4, 0.3][t];
            assert!(
                (tight.p_net[&0][t] - expected).abs() < 1e-4,
                "p_net {} vs {expected}",
                tight.p_net[&0][t]
            );
            assert!((tight.hub_decisions[0].e_out[t] - expected).abs() < 1e-4);
        }
    }

    #[test]
    fn reciprocity_holds_by_construction_and_locally_at_convergence() {
        let horizon = 2;
        let net = tiny_network(horizon, 3);
        let hubs = vec![
            producer_hub("p", 2, horizon, 8.0),
            consumer_hub("c", 3, vec![5.0, 3.0]),
        ];
        let prices = flat_prices(horizon);
        let mut clearing =
            MarketClearing::new(net, hubs, prices, horizon, 1.0, 1e-9, 30_000, true).unwrap();
        let outcome = clearing
            .run(&BTreeMap::new(), &BTreeMap::new(), None, 1e-10, 4000)
            .unwrap();
        assert!(outcome.converged, "residuals {:?}", outcome.state.residuals);
        // Canonical storage makes z_ij + z_ji = 0 structural. The local
        // copies agree with it at convergence.
        let z = &outcome.trades[&(0, 1)];
        let own0 = &outcome.hub_decisions[0].p_tr[&1];
        let own1 = &outcome.hub_decisions[1].p_tr[&0];
        for t in 0..horizon {
            assert!((own0[t] + own1[t]).abs() < 1e-4, "reciprocity residual");
            assert!((own0[t] - z[t]).abs() < 1e-4);
        }
        // The consumer imports from the producer.
        assert!(z.iter().sum::<f64>() < -1.0, "z = {z:?}");
        // No NaN anywhere in the final state.
        assert!(outcome.state.is_finite());
    }

    #[test]
    fn warm_start_cuts_iterations() {
        let horizon = 2;
        let hubs = || {
            vec![
                producer_hub("p", 2, horizon, 8.0),
                consumer_hub("c", 3, vec![5.0, 3.0]),
            ]
        };
        let mut gamma = BTreeMap::new();
        gamma.insert((0usize, 1usize), 0.01);
        let mut clearing = MarketClearing::new(
            tiny_network(horizon, 3),
            hubs(),
            flat_prices(horizon),
            horizon,
            1.0,
            1e-9,
            30_000,
            true,
        )
        .unwrap();
        let cold = clearing
            .run(&gamma, &BTreeMap::new(), None, 1e-8, 4000)
            .unwrap();
        assert!(cold.converged);

        let mut gamma2 = gamma.clone();
        gamma2.insert((0, 1), 0.01 + 1e-9);
        let warm = clearing
            .run(&gamma2, &BTreeMap::new(), Some(cold.state.clone()), 1e-8, 4000)
            .unwrap();
        assert!(warm.converged);
        assert!(
            warm.iters < cold.iters,
            "warm {} vs cold {}",
            warm.iters,
            cold.iters
        );
    }

    #[test]
    fn baseline_losses_ignore_tariffs() {
        use crate::grid_opt::compute_no_trade_baseline;
        let horizon = 2;
        let net = tiny_network(horizon, 3);
        let hubs = vec![
            producer_hub("p", 2, horizon, 8.0),
            consumer_hub("c", 3, vec![5.0, 3.0]),
        ];
        let prices = flat_prices(horizon);
        let base =
            compute_no_trade_baseline(&net, &hubs, &prices, horizon, 1.0, 1e-10, 3000, 1e-9)
                .unwrap();
        // Without trading the free producer feeds its full capacity into the
        // grid at 0.10 and the consumer buys its demand at 0.25.
        let producer_expected = -0.10 * 8.0 * 2.0;
        assert!(
            (base.j_nt[0] - producer_expected).abs() < 5e-3,
            "producer baseline {}",
            base.j_nt[0]
        );
        let expected = 0.25 * 8.0;
        assert!(
            (base.j_nt[1] - expected).abs() < 5e-3,
            "consumer baseline {} vs {expected}",
            base.j_nt[1]
        );
        assert!(base.w_nt.values().all(|s| s.iter().all(|&w| w >= -1e-9)));
    }
}
