//! Jacobians of hub trades with respect to the tariff vector, by
//! differentiating each hub's KKT system at its final subproblem solution.
//!
//! Under strict complementarity the differentiated KKT equations reduce
//! exactly: multipliers of inactive constraints do not move, and active
//! constraints stay tight. The reduced saddle system over the primal
//! directions and the active multipliers is quasi-definite after Tikhonov
//! regularization of the Hessian block, which the shared LDL' machinery
//! factors once per hub; one back-solve per tariff component follows. The
//! result is audited against the full, unreduced system of equations and
//! iteratively refined until its residual is at or below `residual_tol`.
//!
//! Hubs whose solutions fail the strict-complementarity screen are flagged;
//! the caller falls back to central finite differences on the subproblem.

use std::collections::BTreeMap;

use crate::admm::PairId;
use crate::model::{ConstraintSystem, HubSystem};
use crate::qp::ldl::LdlFactor;
use crate::qp::sparse::norm_inf;
use crate::qp::CscMatrix;

#[derive(Debug, Clone)]
pub struct SensitivityParams {
    /// Complementarity screen threshold.
    pub delta_comp: f64,
    /// Tikhonov regularization of the Hessian block.
    pub delta_reg: f64,
    /// Required residual of the differentiated KKT system.
    pub residual_tol: f64,
    /// Trades below this magnitude count as zero (sgn 0).
    pub zero_trade_tol: f64,
}

impl Default for SensitivityParams {
    fn default() -> Self {
        SensitivityParams {
            delta_comp: 1e-6,
            delta_reg: 1e-8,
            residual_tol: 1e-8,
            zero_trade_tol: 1e-7,
        }
    }
}

/// Tariff Jacobian block of one hub.
#[derive(Debug, Clone)]
pub struct HubSensitivity {
    /// Row labels: (partner, step), partner-major, matching the hub's trade
    /// column order.
    pub rows: Vec<(usize, usize)>,
    /// Column labels: every unordered pair of the market.
    pub cols: Vec<PairId>,
    /// d p_tr / d gamma, rows x cols, in the hub's own trade frame.
    pub matrix: Vec<Vec<f64>>,
    pub strict_complementarity: bool,
    /// Worst residual of the differentiated system over all columns.
    pub max_residual: f64,
    /// Tikhonov regularization was needed beyond the default.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct SensitivityResult {
    pub per_hub: BTreeMap<usize, HubSensitivity>,
}

#[derive(Debug, thiserror::Error)]
pub enum SensitivityError {
    #[error("KKT matrix for the sensitivity system could not be factorized")]
    Singular,
    #[error("sensitivity system residual {0:.3e} exceeds the tolerance")]
    ResidualTooLarge(f64),
}

/// Signs of the hub's trades with the zero convention `sgn(0) = 0`.
pub fn sign_pattern(
    trades: &BTreeMap<usize, Vec<f64>>,
    zero_tol: f64,
) -> BTreeMap<usize, Vec<f64>> {
    trades
        .iter()
        .map(|(&j, s)| {
            let signs = s
                .iter()
                .map(|&v| {
                    if v > zero_tol {
                        1.0
                    } else if v < -zero_tol {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            (j, signs)
        })
        .collect()
}

/// Differentiates the KKT conditions of one hub subproblem and assembles the
/// columns of its tariff Jacobian.
///
/// `x` and `lam` are the primal solution and inequality multipliers on the
/// canonical (unsplit) hub system. `sign_pattern` carries `sgn(p_tr)` per
/// partner; a zero sign produces a zero right-hand side contribution.
#[allow(clippy::too_many_arguments)]
pub fn compute_hub_sensitivity(
    hub_index: usize,
    system: &HubSystem,
    x: &[f64],
    lam: &[f64],
    rho: f64,
    sign_pattern: &BTreeMap<usize, Vec<f64>>,
    market_pairs: &[PairId],
    params: &SensitivityParams,
) -> Result<HubSensitivity, SensitivityError> {
    let sys = &system.sys;
    let idx = &system.index;
    let horizon = idx.horizon;
    let n = sys.n;

    // Strict-complementarity screen: no inequality may have both a small
    // slack and a small multiplier.
    let slack = {
        let gx = sys.g.mul(x);
        sys.h
            .iter()
            .zip(gx.iter())
            .map(|(h, v)| h - v)
            .collect::<Vec<f64>>()
    };
    let mut strict = true;
    let mut active_rows = Vec::new();
    for (i, &s) in slack.iter().enumerate() {
        let active = s < params.delta_comp;
        if active {
            active_rows.push(i);
            if lam[i] < params.delta_comp {
                strict = false;
            }
        } else if lam[i] > params.delta_comp {
            // Multiplier without an active constraint: degenerate duals.
            strict = false;
        }
    }

    // Hessian of the subproblem in the unsplit variables: rho on trade and
    // injection coordinates, zero elsewhere, plus Tikhonov regularization.
    let mut quad_cols = vec![false; n];
    for r in idx.trades.values() {
        for t in 0..horizon {
            quad_cols[r.at(t)] = true;
        }
    }
    for t in 0..horizon {
        quad_cols[idx.p_net.at(t)] = true;
    }

    let m_eq = sys.a.nrows;
    let m_act = active_rows.len();
    let dim = n + m_eq + m_act;
    let mut row_of_active = vec![usize::MAX; sys.g.nrows];
    for (k, &i) in active_rows.iter().enumerate() {
        row_of_active[i] = k;
    }

    let build_kkt = |reg: f64| -> CscMatrix {
        let mut t = Vec::new();
        for (jcol, &is_quad) in quad_cols.iter().enumerate() {
            let h = if is_quad { rho } else { 0.0 };
            t.push((jcol, jcol, h + reg));
        }
        for jcol in 0..n {
            for (r, v) in sys.a.col(jcol) {
                t.push((n + r, jcol, v));
                t.push((jcol, n + r, v));
            }
            for (r, v) in sys.g.col(jcol) {
                let k = row_of_active[r];
                if k != usize::MAX {
                    t.push((n + m_eq + k, jcol, v));
                    t.push((jcol, n + m_eq + k, v));
                }
            }
        }
        for r in 0..m_eq + m_act {
            t.push((n + r, n + r, -reg.max(1e-12)));
        }
        CscMatrix::from_triplets(dim, dim, &t)
    };

    let mut degenerate = false;
    let factor = match LdlFactor::new(&build_kkt(params.delta_reg)) {
        Ok(f) => f,
        Err(_) => {
            degenerate = true;
            LdlFactor::new(&build_kkt(params.delta_reg * 1e4))
                .map_err(|_| SensitivityError::Singular)?
        }
    };

    // Application of the unregularized reduced operator.
    let apply = |v: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (jcol, &is_quad) in quad_cols.iter().enumerate() {
            if is_quad {
                out[jcol] += rho * v[jcol];
            }
        }
        for jcol in 0..n {
            for (r, coeff) in sys.a.col(jcol) {
                out[jcol] += coeff * v[n + r];
                out[n + r] += coeff * v[jcol];
            }
            for (r, coeff) in sys.g.col(jcol) {
                let k = row_of_active[r];
                if k != usize::MAX {
                    out[jcol] += coeff * v[n + m_eq + k];
                    out[n + m_eq + k] += coeff * v[jcol];
                }
            }
        }
    };

    let trade_partners: Vec<usize> = idx.trades.keys().copied().collect();
    let mut rows = Vec::new();
    for &j in &trade_partners {
        for t in 0..horizon {
            rows.push((j, t));
        }
    }

    let other = |p: PairId| -> Option<usize> {
        if p.0 == hub_index {
            Some(p.1)
        } else if p.1 == hub_index {
            Some(p.0)
        } else {
            None
        }
    };

    let mut matrix = vec![vec![0.0; market_pairs.len()]; rows.len()];
    let mut max_residual = 0.0_f64;
    let mut op_out = vec![0.0; dim];

    for (col_idx, &pair) in market_pairs.iter().enumerate() {
        let Some(j) = other(pair) else { continue };
        let Some(signs) = sign_pattern.get(&j) else {
            continue;
        };
        if signs.iter().all(|&s| s == 0.0) {
            continue; // zero column by convention
        }
        let mut rhs = vec![0.0; dim];
        let range = &idx.trades[&j];
        for t in 0..horizon {
            rhs[range.at(t)] = -signs[t];
        }
        let mut sol = factor.solve(&rhs);
        // Refinement against the unregularized reduced system.
        let mut resid = vec![0.0; dim];
        for _ in 0..5 {
            apply(&sol, &mut op_out);
            for i in 0..dim {
                resid[i] = rhs[i] - op_out[i];
            }
            if norm_inf(&resid) <= params.residual_tol * 0.1 {
                break;
            }
            let corr = factor.solve(&resid);
            for (s, c) in sol.iter_mut().zip(corr.iter()) {
                *s += c;
            }
        }
        apply(&sol, &mut op_out);
        for i in 0..dim {
            resid[i] = rhs[i] - op_out[i];
        }
        let red_res = norm_inf(&resid);

        // Audit on the full differentiated system: multiplier directions of
        // inactive rows are zero, so only two extra row groups remain.
        let dp = &sol[..n];
        let g_dp = sys.g.mul(dp);
        let mut full_res = red_res;
        for (i, &s) in slack.iter().enumerate() {
            let dlam_i = row_of_active[i];
            let dlam = if dlam_i != usize::MAX {
                sol[n + m_eq + dlam_i]
            } else {
                0.0
            };
            // Row of D(lam) G dp + D(Gx - h) dlam.
            let r = lam[i] * g_dp[i] + (-s) * dlam;
            full_res = full_res.max(r.abs());
        }
        max_residual = max_residual.max(full_res);

        for (ri, (jj, t)) in rows.iter().enumerate() {
            let col = idx.trades[jj].at(*t);
            matrix[ri][col_idx] = sol[col];
        }
    }

    if max_residual > params.residual_tol && strict {
        // A clean active set should solve to tolerance; report it.
        return Err(SensitivityError::ResidualTooLarge(max_residual));
    }

    Ok(HubSensitivity {
        rows,
        cols: market_pairs.to_vec(),
        matrix,
        strict_complementarity: strict,
        max_residual,
        degenerate,
    })
}

/// Central finite differences of a hub's trades with respect to one tariff
/// component, used when the KKT route is flagged degenerate. The resolver
/// re-solves the hub subproblem at the perturbed tariff with everything else
/// frozen and returns the trades per partner.
pub fn finite_difference_column<F>(
    mut resolve: F,
    pair: PairId,
    step: f64,
    rows: &[(usize, usize)],
) -> Result<Vec<f64>, SensitivityError>
where
    F: FnMut(f64) -> Option<BTreeMap<usize, Vec<f64>>>,
{
    let plus = resolve(step).ok_or(SensitivityError::Singular)?;
    let minus = resolve(-step).ok_or(SensitivityError::Singular)?;
    let _ = pair;
    let mut col = Vec::with_capacity(rows.len());
    for &(j, t) in rows {
        let hi = plus.get(&j).map(|s| s[t]).unwrap_or(0.0);
        let lo = minus.get(&j).map(|s| s[t]).unwrap_or(0.0);
        col.push((hi - lo) / (2.0 * step));
    }
    Ok(col)
}

/// Low-level variant for systems that are not hub-shaped: `quad_cols` marks
/// the coordinates carrying the rho Hessian, `trade_cols` the rows of the
/// right-hand side (with their signs).
pub fn differentiate_kkt(
    sys: &ConstraintSystem,
    quad_cols: &[usize],
    rho: f64,
    active_rows: &[usize],
    rhs_signs: &[(usize, f64)],
    params: &SensitivityParams,
) -> Result<Vec<f64>, SensitivityError> {
    let n = sys.n;
    let m_eq = sys.a.nrows;
    let m_act = active_rows.len();
    let dim = n + m_eq + m_act;
    let mut t = Vec::new();
    let mut is_quad = vec![false; n];
    for &c in quad_cols {
        is_quad[c] = true;
    }
    for (jcol, &q) in is_quad.iter().enumerate() {
        t.push((jcol, jcol, if q { rho } else { 0.0 } + params.delta_reg));
    }
    let mut row_of_active = vec![usize::MAX; sys.g.nrows];
    for (k, &i) in active_rows.iter().enumerate() {
        row_of_active[i] = k;
    }
    for jcol in 0..n {
        for (r, v) in sys.a.col(jcol) {
            t.push((n + r, jcol, v));
            t.push((jcol, n + r, v));
        }
        for (r, v) in sys.g.col(jcol) {
            let k = row_of_active[r];
            if k != usize::MAX {
                t.push((n + m_eq + k, jcol, v));
                t.push((jcol, n + m_eq + k, v));
            }
        }
    }
    for r in 0..m_eq + m_act {
        t.push((n + r, n + r, -params.delta_reg.max(1e-12)));
    }
    let kkt = CscMatrix::from_triplets(dim, dim, &t);
    let factor = LdlFactor::new(&kkt).map_err(|_| SensitivityError::Singular)?;
    let mut rhs = vec![0.0; dim];
    for &(c, s) in rhs_signs {
        rhs[c] = -s;
    }
    let mut sol = factor.solve(&rhs);
    // One refinement pass is enough at these scales.
    let mut out = vec![0.0; dim];
    for _ in 0..3 {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (jcol, &q) in is_quad.iter().enumerate() {
            if q {
                out[jcol] += rho * sol[jcol];
            }
        }
        for jcol in 0..n {
            for (r, v) in sys.a.col(jcol) {
                out[jcol] += v * sol[n + r];
                out[n + r] += v * sol[jcol];
            }
            for (r, v) in sys.g.col(jcol) {
                let k = row_of_active[r];
                if k != usize::MAX {
                    out[jcol] += v * sol[n + m_eq + k];
                    out[n + m_eq + k] += v * sol[jcol];
                }
            }
        }
        let mut resid = vec![0.0; dim];
        for i in 0..dim {
            resid[i] = rhs[i] - out[i];
        }
        if norm_inf(&resid) <= params.residual_tol * 0.1 {
            break;
        }
        let corr = factor.solve(&resid);
        for (s, c) in sol.iter_mut().zip(corr.iter()) {
            *s += c;
        }
    }
    Ok(sol)
}
