//! Centralized monolithic market clearing.
//!
//! Assembles one social-welfare QP over every hub's variables, the full
//! network and explicit reciprocity coupling, then solves it in one shot.
//! This is the reference the distributed consensus loop is validated
//! against, and what `--oracle` runs on small instances. The assembly path
//! shares only the per-agent constraint builders with the ADMM code; all
//! coupling is written here independently.

use std::collections::BTreeMap;

use crate::admm::{pair_id, PairId};
use crate::model::{
    assemble_hub_constraints, assemble_network_constraints, HubDecision, HubSpec, ModelError,
    NetworkDecision, NetworkSpec, PriceSet,
};
use crate::qp::{solve_qp, CscMatrix, QPProblem, QpError, SolveStatus};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("centralized clearing ended with status {0:?}")]
    NotOptimal(SolveStatus),
}

#[derive(Debug, Clone)]
pub struct CentralizedOutcome {
    /// Trades per canonical pair (lower hub's import positive).
    pub trades: BTreeMap<PairId, Vec<f64>>,
    pub p_net: BTreeMap<usize, Vec<f64>>,
    pub hub_decisions: Vec<HubDecision>,
    pub network_decision: NetworkDecision,
    /// Social objective: hub dispatch costs, tariff terms of both trade
    /// sides, and the network import cost. Bilateral payments cancel.
    pub objective: f64,
}

/// Solves the social-welfare problem with all agents' constraint sets,
/// reciprocity between the two directed trade variables of each pair, and
/// shared net injections. With `with_trades` false the trade variables are
/// deleted, which is the no-trade baseline.
pub fn centralized_clearing(
    net: &NetworkSpec,
    hubs: &[HubSpec],
    prices: &PriceSet,
    horizon: usize,
    gamma: &BTreeMap<PairId, f64>,
    with_trades: bool,
    qp_tol: f64,
    qp_max_iter: usize,
) -> Result<CentralizedOutcome, OracleError> {
    let num_hubs = hubs.len();
    let mut built_hubs = Vec::with_capacity(num_hubs);
    let mut offsets = Vec::with_capacity(num_hubs);
    let mut cursor = 0usize;
    for (i, hub) in hubs.iter().enumerate() {
        let partners: Vec<usize> = if with_trades {
            (0..num_hubs).filter(|&j| j != i).collect()
        } else {
            Vec::new()
        };
        let built = assemble_hub_constraints(hub, &partners, horizon)?;
        offsets.push(cursor);
        cursor += built.sys.n;
        built_hubs.push(built);
    }
    let hub_buses: Vec<usize> = hubs.iter().map(|h| h.bus).collect();
    let built_net = assemble_network_constraints(net, &hub_buses, horizon)?;
    let net_offset = cursor;
    cursor += built_net.sys.n;

    // Split variables per ordered trade direction carry the tariff cost.
    let mut split_cols: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    if with_trades {
        for i in 0..num_hubs {
            for j in 0..num_hubs {
                if i != j {
                    split_cols.insert((i, j), (cursor, cursor + horizon));
                    cursor += 2 * horizon;
                }
            }
        }
    }
    let n = cursor;

    let mut q = vec![0.0; n];
    let mut a_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut b_rhs: Vec<f64> = Vec::new();
    let mut g_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut h_rhs: Vec<f64> = Vec::new();
    let mut erow = 0usize;
    let mut grow = 0usize;

    for (i, built) in built_hubs.iter().enumerate() {
        let off = offsets[i];
        for jcol in 0..built.sys.a.ncols {
            for (r, v) in built.sys.a.col(jcol) {
                a_trip.push((erow + r, off + jcol, v));
            }
        }
        b_rhs.extend_from_slice(&built.sys.b);
        erow += built.sys.a.nrows;
        for jcol in 0..built.sys.g.ncols {
            for (r, v) in built.sys.g.col(jcol) {
                g_trip.push((grow + r, off + jcol, v));
            }
        }
        h_rhs.extend_from_slice(&built.sys.h);
        grow += built.sys.g.nrows;

        let idx = &built.index;
        for t in 0..horizon {
            q[off + idx.e_out.at(t)] += prices.c_e_out[t];
            q[off + idx.e_in.at(t)] -= prices.c_e_in[t];
            q[off + idx.gas.at(t)] += prices.c_g_out[t];
        }
    }
    {
        let off = net_offset;
        for jcol in 0..built_net.sys.a.ncols {
            for (r, v) in built_net.sys.a.col(jcol) {
                a_trip.push((erow + r, off + jcol, v));
            }
        }
        b_rhs.extend_from_slice(&built_net.sys.b);
        erow += built_net.sys.a.nrows;
        for jcol in 0..built_net.sys.g.ncols {
            for (r, v) in built_net.sys.g.col(jcol) {
                g_trip.push((grow + r, off + jcol, v));
            }
        }
        h_rhs.extend_from_slice(&built_net.sys.h);
        grow += built_net.sys.g.nrows;
        for (_, r) in &built_net.index.p_mg {
            for t in 0..horizon {
                q[off + r.at(t)] += prices.c_mg[t] * net.s_base_kw;
            }
        }
    }

    // Coupling: hub p_net equals the network's local injection.
    for (i, built) in built_hubs.iter().enumerate() {
        for t in 0..horizon {
            a_trip.push((erow, offsets[i] + built.index.p_net.at(t), 1.0));
            a_trip.push((erow, net_offset + built_net.index.p_net[i].at(t), -1.0));
            b_rhs.push(0.0);
            erow += 1;
        }
    }

    if with_trades {
        // Reciprocity between the directed trade variables of each pair.
        for i in 0..num_hubs {
            for j in (i + 1)..num_hubs {
                let ri = &built_hubs[i].index.trades[&j];
                let rj = &built_hubs[j].index.trades[&i];
                for t in 0..horizon {
                    a_trip.push((erow, offsets[i] + ri.at(t), 1.0));
                    a_trip.push((erow, offsets[j] + rj.at(t), 1.0));
                    b_rhs.push(0.0);
                    erow += 1;
                }
            }
        }
        // Split linkage and tariff costs, per ordered direction.
        for i in 0..num_hubs {
            for j in 0..num_hubs {
                if i == j {
                    continue;
                }
                let (plus, minus) = split_cols[&(i, j)];
                let r = &built_hubs[i].index.trades[&j];
                let g = gamma.get(&pair_id(i, j)).copied().unwrap_or(0.0);
                for t in 0..horizon {
                    a_trip.push((erow, offsets[i] + r.at(t), 1.0));
                    a_trip.push((erow, plus + t, -1.0));
                    a_trip.push((erow, minus + t, 1.0));
                    b_rhs.push(0.0);
                    erow += 1;
                    q[plus + t] += g;
                    q[minus + t] += g;
                    g_trip.push((grow, plus + t, -1.0));
                    h_rhs.push(0.0);
                    grow += 1;
                    g_trip.push((grow, minus + t, -1.0));
                    h_rhs.push(0.0);
                    grow += 1;
                }
            }
        }
    }

    let prob = QPProblem::new(
        CscMatrix::zeros(n, n),
        q,
        CscMatrix::from_triplets(grow, n, &g_trip),
        h_rhs,
        CscMatrix::from_triplets(erow, n, &a_trip),
        b_rhs,
    );
    let sol = solve_qp(&prob, qp_tol, qp_max_iter, None)?;
    if sol.status != SolveStatus::Optimal {
        return Err(OracleError::NotOptimal(sol.status));
    }

    let mut hub_decisions = Vec::with_capacity(num_hubs);
    for (i, built) in built_hubs.iter().enumerate() {
        let slice = &sol.x[offsets[i]..offsets[i] + built.sys.n];
        hub_decisions.push(built.index.extract_decision(slice, &hubs[i]));
    }
    let net_slice = &sol.x[net_offset..net_offset + built_net.sys.n];
    let network_decision = built_net.index.extract_decision(net_slice, net);

    let mut trades = BTreeMap::new();
    if with_trades {
        for i in 0..num_hubs {
            for j in (i + 1)..num_hubs {
                trades.insert((i, j), hub_decisions[i].p_tr[&j].clone());
            }
        }
    }
    let p_net = (0..num_hubs)
        .map(|i| (i, hub_decisions[i].p_net.clone()))
        .collect();

    Ok(CentralizedOutcome {
        trades,
        p_net,
        hub_decisions,
        network_decision,
        objective: sol.obj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BusSpec, LineSpec};
    use crate::testutil::{consumer_hub, flat_prices, gas_producer_hub};

    fn network(horizon: usize) -> NetworkSpec {
        NetworkSpec {
            buses: vec![
                BusSpec {
                    id: 1,
                    theta_limits: (-0.75, 0.75),
                    v_limits: (0.95, 1.05),
                    f_p: vec![0.0; horizon],
                    is_main_grid: true,
                },
                BusSpec {
                    id: 2,
                    theta_limits: (-0.75, 0.75),
                    v_limits: (0.95, 1.05),
                    f_p: vec![0.0; horizon],
                    is_main_grid: false,
                },
            ],
            lines: vec![LineSpec {
                id: 1,
                from_bus: 1,
                to_bus: 2,
                b_pu: 10.0,
                g_pu: 0.0,
                f_max_kw: 5000.0,
                m_loss: 0.02,
                q_loss_kw: 0.0,
            }],
            s_base_kw: 1000.0,
            polygon_segments: 8,
            anchor_reference: true,
        }
    }

    #[test]
    fn consensus_matches_centralized_on_two_hub_instance() {
        let horizon = 2;
        let net = network(horizon);
        let hubs = vec![
            gas_producer_hub("p", 1, horizon, 10.0, 0.28),
            consumer_hub("c", 2, vec![6.0, 2.0]),
        ];
        let prices = flat_prices(horizon);
        let gamma = BTreeMap::new();

        let central =
            centralized_clearing(&net, &hubs, &prices, horizon, &gamma, true, 1e-9, 60_000)
                .unwrap();

        let mut clearing = crate::admm::MarketClearing::new(
            net,
            hubs,
            prices,
            horizon,
            1.0,
            1e-9,
            30_000,
            true,
        )
        .unwrap();
        let distributed = clearing
            .run(&gamma, &BTreeMap::new(), None, 1e-10, 5000)
            .unwrap();
        assert!(distributed.converged);

        let scale = central.trades[&(0, 1)]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(1.0);
        for t in 0..horizon {
            let a = distributed.trades[&(0, 1)][t];
            let b = central.trades[&(0, 1)][t];
            assert!(
                (a - b).abs() <= 1e-3 * scale,
                "t={t}: distributed {a} vs centralized {b}"
            );
        }
    }

    #[test]
    fn baseline_oracle_deletes_trades() {
        let horizon = 1;
        let net = network(horizon);
        let hubs = vec![
            gas_producer_hub("p", 1, horizon, 10.0, 0.28),
            consumer_hub("c", 2, vec![6.0]),
        ];
        let prices = flat_prices(horizon);
        let out = centralized_clearing(
            &net,
            &hubs,
            &prices,
            horizon,
            &BTreeMap::new(),
            false,
            1e-9,
            60_000,
        )
        .unwrap();
        assert!(out.trades.is_empty());
        // Consumer must pull its whole demand from the grid.
        assert!((out.p_net[&1][0] - 6.0).abs() < 1e-4);
    }
}
