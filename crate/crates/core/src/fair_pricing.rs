//! Fair bilateral trade prices and payment settlement.
//!
//! With the dispatch fixed, each hub's cost is affine in the bilateral
//! prices, so equalizing the normalized cost reductions is a convex QP.
//! The semi-decentralized route mirrors the deployment: one virtual
//! mediator per pair takes gradient steps on the variance of the
//! reductions, a coordinator supplies the network-wide average, and the
//! iterate is projected back onto the individually-rational set. A
//! centralized solve of the same QP is available as the oracle mode.

use std::collections::BTreeMap;

use crate::admm::PairId;
use crate::hypergrad::TariffMatrix;
use crate::qp::{solve_qp, CscMatrix, QPProblem, QpError, SolveStatus};

#[derive(Debug, thiserror::Error)]
pub enum FairPricingError {
    #[error("hub {0} has a zero no-trade baseline; the normalized reduction is undefined")]
    ZeroBaseline(usize),
    #[error("the price constraint set is empty; binding hubs: {0:?}")]
    Infeasible(Vec<usize>),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("input dimensions do not agree")]
    Dimension,
}

/// Symmetric bilateral price per unordered pair [CHF/kWh]. Prices are
/// constant over a settlement window by default; the per-step flag in the
/// configuration switches to one price per (pair, step).
#[derive(Debug, Clone, PartialEq)]
pub struct TradePriceMatrix {
    num_hubs: usize,
    horizon: usize,
    values: BTreeMap<PairId, Vec<f64>>,
}

impl TradePriceMatrix {
    pub fn zeros(num_hubs: usize, horizon: usize) -> Self {
        let values = crate::admm::all_pairs(num_hubs)
            .into_iter()
            .map(|p| (p, vec![0.0; horizon]))
            .collect();
        TradePriceMatrix {
            num_hubs,
            horizon,
            values,
        }
    }

    pub fn uniform(num_hubs: usize, horizon: usize, price: f64) -> Self {
        let mut m = Self::zeros(num_hubs, horizon);
        for s in m.values.values_mut() {
            s.iter_mut().for_each(|v| *v = price);
        }
        m
    }

    /// Symmetric lookup of the price series; `get(i,j) == get(j,i)`.
    pub fn series(&self, i: usize, j: usize) -> &[f64] {
        &self.values[&crate::admm::pair_id(i, j)]
    }

    pub fn set_constant(&mut self, pair: PairId, price: f64) {
        let s = self.values.get_mut(&pair).expect("pair exists");
        s.iter_mut().for_each(|v| *v = price);
    }

    pub fn set_series(&mut self, pair: PairId, series: Vec<f64>) {
        assert_eq!(series.len(), self.horizon);
        self.values.insert(pair, series);
    }

    pub fn pair_series(&self) -> &BTreeMap<PairId, Vec<f64>> {
        &self.values
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Normalized cost reduction `(J_nt - J) / J_nt`.
pub fn normalized_reduction(j_nt: f64, j: f64) -> Result<f64, FairPricingError> {
    if j_nt == 0.0 {
        return Err(FairPricingError::ZeroBaseline(usize::MAX));
    }
    Ok((j_nt - j) / j_nt)
}

#[derive(Debug, Clone)]
pub struct FairnessReport {
    /// Normalized reduction per hub at the returned prices.
    pub d: Vec<f64>,
    pub variance: f64,
    pub j_nt: Vec<f64>,
    pub j_actual: Vec<f64>,
    /// Trade payment per pair over the window, positive when the lower-
    /// indexed hub pays.
    pub payments: BTreeMap<PairId, f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct FairPricingConfig {
    /// Mediator gradient step, halved on variance increases.
    pub beta1: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Optional box `0 <= c <= cap` on prices.
    pub cap: Option<f64>,
    /// One price per (pair, step) instead of per pair.
    pub per_step: bool,
}

impl Default for FairPricingConfig {
    fn default() -> Self {
        FairPricingConfig {
            beta1: 0.05,
            tol: 1e-10,
            max_iter: 20_000,
            cap: None,
            per_step: false,
        }
    }
}

pub struct FairPricingInputs<'a> {
    pub num_hubs: usize,
    /// Trades per canonical pair over the settlement window.
    pub trades: &'a BTreeMap<PairId, Vec<f64>>,
    /// No-trade baseline cost per hub over the same window.
    pub j_nt: &'a [f64],
    /// Hub cost at zero bilateral prices (tariffs included) over the window.
    pub j_base: &'a [f64],
}

/// Affine structure of the reductions: d = d0 - W c with one column per
/// price variable.
struct AffineModel {
    /// Price variables: (pair, step range) — one entry per pair in constant
    /// mode, one per (pair, step) otherwise.
    vars: Vec<(PairId, Option<usize>)>,
    /// w[i][v]: coefficient of variable v in J_i.
    w_cost: Vec<Vec<f64>>,
    d0: Vec<f64>,
    horizon: usize,
}

impl AffineModel {
    fn new(inputs: &FairPricingInputs, per_step: bool) -> Result<Self, FairPricingError> {
        let h = inputs.num_hubs;
        if inputs.j_nt.len() != h || inputs.j_base.len() != h {
            return Err(FairPricingError::Dimension);
        }
        for (i, &jn) in inputs.j_nt.iter().enumerate() {
            if jn == 0.0 {
                return Err(FairPricingError::ZeroBaseline(i));
            }
        }
        let horizon = inputs
            .trades
            .values()
            .next()
            .map(|s| s.len())
            .unwrap_or(0);
        let mut vars = Vec::new();
        for (&p, series) in inputs.trades {
            if per_step {
                for t in 0..series.len() {
                    vars.push((p, Some(t)));
                }
            } else {
                vars.push((p, None));
            }
        }
        let mut w_cost = vec![vec![0.0; vars.len()]; h];
        for (v, &(p, step)) in vars.iter().enumerate() {
            let series = &inputs.trades[&p];
            let energy = match step {
                Some(t) => series[t],
                None => series.iter().sum(),
            };
            // The lower hub's frame is canonical: it pays c * p, the upper
            // hub receives the same.
            w_cost[p.0][v] = energy;
            w_cost[p.1][v] = -energy;
        }
        let d0 = (0..h)
            .map(|i| (inputs.j_nt[i] - inputs.j_base[i]) / inputs.j_nt[i])
            .collect();
        Ok(AffineModel {
            vars,
            w_cost,
            d0,
            horizon,
        })
    }

    fn reductions(&self, inputs: &FairPricingInputs, c: &[f64]) -> Vec<f64> {
        (0..inputs.num_hubs)
            .map(|i| {
                let pay: f64 = self.w_cost[i]
                    .iter()
                    .zip(c.iter())
                    .map(|(w, x)| w * x)
                    .sum();
                self.d0[i] - pay / inputs.j_nt[i]
            })
            .collect()
    }

    fn variance(d: &[f64]) -> f64 {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter().map(|v| (v - mean) * (v - mean)).sum()
    }

    fn to_matrix(&self, inputs: &FairPricingInputs, c: &[f64]) -> TradePriceMatrix {
        let mut m = TradePriceMatrix::zeros(inputs.num_hubs, self.horizon.max(1));
        for (v, &(p, step)) in self.vars.iter().enumerate() {
            match step {
                Some(t) => {
                    let mut series = m.values[&p].clone();
                    series[t] = c[v];
                    m.set_series(p, series);
                }
                None => m.set_constant(p, c[v]),
            }
        }
        m
    }

    /// Individual-rationality rows `J_i(c) <= J_nt_i` plus optional caps, as
    /// `G c <= h`.
    fn feasibility_rows(
        &self,
        inputs: &FairPricingInputs,
        cap: Option<f64>,
    ) -> (CscMatrix, Vec<f64>) {
        let nv = self.vars.len();
        let mut trip = Vec::new();
        let mut h = Vec::new();
        let mut row = 0usize;
        for i in 0..inputs.num_hubs {
            // Hubs untouched by any priced trade have constant cost: their
            // rationality row is vacuous and would only poison feasibility
            // with upstream solver noise.
            if self.w_cost[i].iter().all(|&w| w == 0.0) {
                continue;
            }
            for (v, &w) in self.w_cost[i].iter().enumerate() {
                if w != 0.0 {
                    trip.push((row, v, w));
                }
            }
            h.push(inputs.j_nt[i] - inputs.j_base[i]);
            row += 1;
        }
        if let Some(cap) = cap {
            for v in 0..nv {
                trip.push((row, v, 1.0));
                h.push(cap);
                row += 1;
                trip.push((row, v, -1.0));
                h.push(0.0);
                row += 1;
            }
        }
        (CscMatrix::from_triplets(row, nv, &trip), h)
    }

    fn binding_hubs(&self, inputs: &FairPricingInputs) -> Vec<usize> {
        (0..inputs.num_hubs)
            .filter(|&i| {
                inputs.j_nt[i] - inputs.j_base[i] < 0.0
                    && self.w_cost[i].iter().any(|&w| w != 0.0)
            })
            .collect()
    }
}

/// Euclidean projection onto the feasible price set.
fn project_onto_c(
    model: &AffineModel,
    inputs: &FairPricingInputs,
    cap: Option<f64>,
    c_hat: &[f64],
) -> Result<Vec<f64>, FairPricingError> {
    let (g, h) = model.feasibility_rows(inputs, cap);
    // Fast path: already feasible.
    let gc = g.mul(c_hat);
    if gc.iter().zip(h.iter()).all(|(v, hh)| *v <= hh + 1e-12) {
        return Ok(c_hat.to_vec());
    }
    let nv = c_hat.len();
    let p = CscMatrix::from_triplets(nv, nv, &(0..nv).map(|i| (i, i, 2.0)).collect::<Vec<_>>());
    let q: Vec<f64> = c_hat.iter().map(|&v| -2.0 * v).collect();
    let prob = QPProblem::new(p, q, g, h, CscMatrix::zeros(0, nv), vec![]);
    let sol = solve_qp(&prob, 1e-10, 50_000, None)?;
    if sol.status != SolveStatus::Optimal {
        return Err(FairPricingError::Infeasible(model.binding_hubs(inputs)));
    }
    Ok(sol.x)
}

/// Semi-decentralized price computation: per-pair mediators step along the
/// variance gradient using the coordinator's average reduction, then the
/// iterate is projected onto the individually-rational set. Returns the
/// prices and a fairness report.
pub fn solve_fair_prices(
    inputs: &FairPricingInputs,
    config: &FairPricingConfig,
) -> Result<(TradePriceMatrix, FairnessReport), FairPricingError> {
    let model = AffineModel::new(inputs, config.per_step)?;
    let nv = model.vars.len();
    let h = inputs.num_hubs as f64;

    if nv == 0 || model.w_cost.iter().all(|r| r.iter().all(|&w| w == 0.0)) {
        // Nothing was traded: any price is feasible, return zeros.
        let d = model.reductions(inputs, &[]);
        let variance = AffineModel::variance(&d);
        let report = FairnessReport {
            d: d.clone(),
            variance,
            j_nt: inputs.j_nt.to_vec(),
            j_actual: inputs.j_base.to_vec(),
            payments: BTreeMap::new(),
            iterations: 0,
        };
        return Ok((
            TradePriceMatrix::zeros(inputs.num_hubs, model.horizon.max(1)),
            report,
        ));
    }

    let mut c = project_onto_c(&model, inputs, config.cap, &vec![0.0; nv])?;
    let mut d = model.reductions(inputs, &c);
    let mut variance = AffineModel::variance(&d);
    let mut beta = config.beta1;
    let mut iterations = 0usize;

    for it in 0..config.max_iter {
        iterations = it + 1;
        let mean = d.iter().sum::<f64>() / h;
        // Mediator gradients: each pair's variable sees only its two member
        // hubs' reductions plus the coordinator's average.
        let mut grad = vec![0.0; nv];
        for (v, &(p, _)) in model.vars.iter().enumerate() {
            let mut g = 0.0;
            for &i in [p.0, p.1].iter() {
                let dd = 2.0 * (d[i] - mean);
                let ddi_dc = -model.w_cost[i][v] / inputs.j_nt[i];
                g += dd * ddi_dc;
            }
            grad[v] = g;
        }
        let step: Vec<f64> = c.iter().zip(grad.iter()).map(|(x, g)| x - beta * g).collect();
        let projected = project_onto_c(&model, inputs, config.cap, &step)?;
        let d_new = model.reductions(inputs, &projected);
        let var_new = AffineModel::variance(&d_new);
        if var_new > variance + 1e-15 {
            beta *= 0.5;
            if beta < 1e-12 {
                break;
            }
            continue;
        }
        let delta = projected
            .iter()
            .zip(c.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        c = projected;
        d = d_new;
        variance = var_new;
        // Accepted: cautiously lengthen the step so flat landscapes do not
        // take tens of thousands of iterations.
        beta = (beta * 1.25).min(config.beta1 * 1e6);
        if delta <= config.tol {
            break;
        }
    }

    let j_actual: Vec<f64> = (0..inputs.num_hubs)
        .map(|i| {
            let pay: f64 = model.w_cost[i]
                .iter()
                .zip(c.iter())
                .map(|(w, x)| w * x)
                .sum();
            inputs.j_base[i] + pay
        })
        .collect();
    let mut payments = BTreeMap::new();
    for (v, &(p, _)) in model.vars.iter().enumerate() {
        *payments.entry(p).or_insert(0.0) += model.w_cost[p.0][v] * c[v];
    }
    let matrix = model.to_matrix(inputs, &c);
    Ok((
        matrix,
        FairnessReport {
            d,
            variance,
            j_nt: inputs.j_nt.to_vec(),
            j_actual,
            payments,
            iterations,
        },
    ))
}

/// Centralized solve of the same variance-minimization QP; the oracle mode.
pub fn solve_fair_prices_centralized(
    inputs: &FairPricingInputs,
    config: &FairPricingConfig,
) -> Result<(TradePriceMatrix, FairnessReport), FairPricingError> {
    let model = AffineModel::new(inputs, config.per_step)?;
    let nv = model.vars.len();
    if nv == 0 || model.w_cost.iter().all(|r| r.iter().all(|&w| w == 0.0)) {
        return solve_fair_prices(inputs, config);
    }
    let h = inputs.num_hubs;
    // d = d0 - W c with W[i][v] = w_cost[i][v] / j_nt[i]; the objective is
    // || centered(d) ||^2, a PSD quadratic in c.
    let w: Vec<Vec<f64>> = (0..h)
        .map(|i| {
            model.w_cost[i]
                .iter()
                .map(|v| v / inputs.j_nt[i])
                .collect()
        })
        .collect();
    let center = |x: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / h as f64;
        x.iter().map(|v| v - mean).collect()
    };
    let wc: Vec<Vec<f64>> = {
        // Column-centered W.
        let mut cols = vec![vec![0.0; h]; nv];
        for i in 0..h {
            for v in 0..nv {
                cols[v][i] = w[i][v];
            }
        }
        cols.into_iter().map(|col| center(&col)).collect()
    };
    let d0c = center(&model.d0);
    let mut p_trip = Vec::new();
    for a in 0..nv {
        for b in 0..nv {
            let dot: f64 = (0..h).map(|i| wc[a][i] * wc[b][i]).sum();
            if dot != 0.0 {
                p_trip.push((a, b, 2.0 * dot));
            }
        }
    }
    let q: Vec<f64> = (0..nv)
        .map(|v| -2.0 * (0..h).map(|i| wc[v][i] * d0c[i]).sum::<f64>())
        .collect();
    let (g, hh) = model.feasibility_rows(inputs, config.cap);
    let prob = QPProblem::new(
        CscMatrix::from_triplets(nv, nv, &p_trip),
        q,
        g,
        hh,
        CscMatrix::zeros(0, nv),
        vec![],
    );
    let sol = solve_qp(&prob, 1e-11, 100_000, None)?;
    if sol.status != SolveStatus::Optimal {
        return Err(FairPricingError::Infeasible(model.binding_hubs(inputs)));
    }
    let c = sol.x;
    let d = model.reductions(inputs, &c);
    let variance = AffineModel::variance(&d);
    let j_actual: Vec<f64> = (0..h)
        .map(|i| {
            let pay: f64 = model.w_cost[i]
                .iter()
                .zip(c.iter())
                .map(|(wv, x)| wv * x)
                .sum();
            inputs.j_base[i] + pay
        })
        .collect();
    let mut payments = BTreeMap::new();
    for (v, &(p, _)) in model.vars.iter().enumerate() {
        *payments.entry(p).or_insert(0.0) += model.w_cost[p.0][v] * c[v];
    }
    let matrix = model.to_matrix(inputs, &c);
    Ok((
        matrix,
        FairnessReport {
            d,
            variance,
            j_nt: inputs.j_nt.to_vec(),
            j_actual,
            payments,
            iterations: sol.iters,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Participant {
    Hub(usize),
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Trade,
    Tariff,
}

#[derive(Debug, Clone)]
pub struct LedgerEntry {
    pub window: usize,
    pub pair: PairId,
    pub kind: EntryKind,
    pub payer: Participant,
    pub payee: Participant,
    pub energy_kwh: f64,
    pub price: f64,
    pub amount: f64,
}

/// Double-entry settlement ledger.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    pub entries: Vec<LedgerEntry>,
}

impl Ledger {
    /// Net position per participant; payments debit the payer and credit
    /// the payee with the identical amount.
    pub fn net_positions(&self) -> BTreeMap<Participant, f64> {
        let mut pos = BTreeMap::new();
        for e in &self.entries {
            *pos.entry(e.payer).or_insert(0.0) -= e.amount;
            *pos.entry(e.payee).or_insert(0.0) += e.amount;
        }
        pos
    }

    pub fn conservation_residual(&self) -> f64 {
        self.net_positions().values().sum::<f64>().abs()
    }

    pub fn network_tariff_receipts(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Tariff && e.payee == Participant::Network)
            .map(|e| e.amount)
            .sum()
    }

    pub fn extend(&mut self, other: Ledger) {
        self.entries.extend(other.entries);
    }
}

/// Settles one window: bilateral trade payments (payer is the importer) and
/// tariff payments of both hubs of each pair to the network operator.
pub fn settle(
    trades: &BTreeMap<PairId, Vec<f64>>,
    prices: &TradePriceMatrix,
    tariffs: &TariffMatrix,
    window: usize,
) -> Ledger {
    let mut ledger = Ledger::default();
    for (&p, series) in trades {
        let abs_energy: f64 = series.iter().map(|v| v.abs()).sum();
        if abs_energy == 0.0 {
            continue;
        }
        let price_series = prices.series(p.0, p.1);
        let paid_by_lower: f64 = series
            .iter()
            .zip(price_series.iter())
            .map(|(e, c)| c * e)
            .sum();
        if paid_by_lower != 0.0 {
            let (payer, payee, amount) = if paid_by_lower > 0.0 {
                (Participant::Hub(p.0), Participant::Hub(p.1), paid_by_lower)
            } else {
                (Participant::Hub(p.1), Participant::Hub(p.0), -paid_by_lower)
            };
            let net_energy: f64 = series.iter().sum();
            ledger.entries.push(LedgerEntry {
                window,
                pair: p,
                kind: EntryKind::Trade,
                payer,
                payee,
                energy_kwh: net_energy.abs(),
                price: if net_energy.abs() > 1e-12 {
                    amount / net_energy.abs()
                } else {
                    0.0
                },
                amount,
            });
        }
        let gamma = tariffs.get(p.0, p.1);
        if gamma > 0.0 {
            for &hub in [p.0, p.1].iter() {
                ledger.entries.push(LedgerEntry {
                    window,
                    pair: p,
                    kind: EntryKind::Tariff,
                    payer: Participant::Hub(hub),
                    payee: Participant::Network,
                    energy_kwh: abs_energy,
                    price: gamma,
                    amount: gamma * abs_energy,
                });
            }
        }
    }
    ledger
}

#[cfg(test)]
mod tests;
