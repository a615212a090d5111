//! Domain types and constraint-matrix assembly for energy hubs and the
//! distribution network over a discrete horizon.
//!
//! Hub and network feasible sets are materialized as canonical systems
//! `{G x <= h, A x = b}` over a stacked variable vector, together with an
//! index map for every symbol. All assembly is pure: no shared state, safe
//! to call concurrently.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::qp::CscMatrix;

/// Channel tag for one entry of a device input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    GIn,
    PIn,
    QIn,
    POut,
    QOut,
}

/// A bound that is either constant or varies by time step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cap {
    Const(f64),
    Series(Vec<f64>),
}

impl Cap {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Cap::Const(v) => *v,
            Cap::Series(s) => s[t],
        }
    }

    fn check_len(&self, horizon: usize) -> bool {
        match self {
            Cap::Const(_) => true,
            Cap::Series(s) => s.len() == horizon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputBound {
    pub lo: Cap,
    pub hi: Cap,
}

/// Linear internal-energy-state model of a single hub device.
///
/// States follow `x[t+1] = A x[t] + B u[t] + D d[t]` with box constraints on
/// states and inputs. Conversion couplings (e.g. a CHP tying electric and
/// thermal output to fuel intake) are expressed as zero-width states: a state
/// with bounds `[0, 0]` turns its dynamics row into a static balance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceModel {
    pub id: String,
    /// State map, row-major, `nx x nx`.
    pub a: Vec<Vec<f64>>,
    /// Input map, `nx x nu`.
    pub b: Vec<Vec<f64>>,
    /// Disturbance map, `nx x nd`.
    pub d: Vec<Vec<f64>>,
    /// Static state bounds `[lo, hi]` per state [kWh].
    pub x_bounds: Vec<(f64, f64)>,
    /// Input bounds per input [kW]; may vary by time step.
    pub u_bounds: Vec<InputBound>,
    /// Channel tag per input-vector entry.
    pub channel_map: Vec<Channel>,
    /// Initial state; defaults to the lower bounds.
    #[serde(default)]
    pub x_init: Option<Vec<f64>>,
}

impl DeviceModel {
    pub fn num_states(&self) -> usize {
        self.x_bounds.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.u_bounds.len()
    }

    pub fn num_disturbances(&self) -> usize {
        self.d.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn initial_state(&self) -> Vec<f64> {
        match &self.x_init {
            Some(x0) => x0.clone(),
            None => self.x_bounds.iter().map(|&(lo, _)| lo).collect(),
        }
    }
}

/// One energy hub: devices, demands and the bus it connects to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HubSpec {
    pub id: String,
    pub bus: usize,
    pub devices: Vec<DeviceModel>,
    /// Electricity demand per step [kWh].
    pub l_p: Vec<f64>,
    /// Thermal demand per step [kWh].
    pub l_q: Vec<f64>,
    /// Disturbance series per device: `[device][t][dim]`.
    #[serde(default)]
    pub disturbances: Vec<Vec<Vec<f64>>>,
}

/// Grid-facing price series, all CHF/kWh, all of horizon length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceSet {
    pub c_e_out: Vec<f64>,
    pub c_e_in: Vec<f64>,
    pub c_g_out: Vec<f64>,
    pub c_mg: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusSpec {
    pub id: usize,
    pub theta_limits: (f64, f64),
    pub v_limits: (f64, f64),
    /// Non-hub consumer demand per step [kW].
    pub f_p: Vec<f64>,
    #[serde(default)]
    pub is_main_grid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineSpec {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    /// Susceptance [p.u.].
    pub b_pu: f64,
    /// Conductance [p.u.].
    pub g_pu: f64,
    /// Apparent-flow capacity [kW].
    pub f_max_kw: f64,
    /// Loss slope [unitless].
    pub m_loss: f64,
    /// Loss offset [kW].
    pub q_loss_kw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    /// Power base converting kW to p.u. (12.66 kV feeder base).
    pub s_base_kw: f64,
    /// Segment count of the polygonal line-capacity approximation.
    #[serde(default = "default_polygon_segments")]
    pub polygon_segments: usize,
    /// Pin voltage/angle of the first main-grid bus to (1, 0) to remove the
    /// translation null space of the linearized flow model.
    #[serde(default = "default_true")]
    pub anchor_reference: bool,
}

fn default_polygon_segments() -> usize {
    8
}

fn default_true() -> bool {
    true
}

impl NetworkSpec {
    pub fn bus_position(&self, bus_id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == bus_id)
    }

    pub fn main_grid_positions(&self) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_main_grid)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Dispatch of one hub over the horizon.
#[derive(Debug, Clone)]
pub struct HubDecision {
    /// Per device: state trajectory including the initial state, `[nx][T+1]`.
    pub x: Vec<Vec<Vec<f64>>>,
    /// Per device: input trajectory `[nu][T]`.
    pub u: Vec<Vec<Vec<f64>>>,
    pub e_in: Vec<f64>,
    pub e_out: Vec<f64>,
    pub g: Vec<f64>,
    pub p_net: Vec<f64>,
    /// Trades in this hub's own frame (imports positive), keyed by partner.
    pub p_tr: BTreeMap<usize, Vec<f64>>,
}

impl HubDecision {
    pub fn zero(hub: &HubSpec, partners: &[usize], horizon: usize) -> Self {
        HubDecision {
            x: hub
                .devices
                .iter()
                .map(|d| vec![vec![0.0; horizon + 1]; d.num_states()])
                .collect(),
            u: hub
                .devices
                .iter()
                .map(|d| vec![vec![0.0; horizon]; d.num_inputs()])
                .collect(),
            e_in: vec![0.0; horizon],
            e_out: vec![0.0; horizon],
            g: vec![0.0; horizon],
            p_net: vec![0.0; horizon],
            p_tr: partners.iter().map(|&j| (j, vec![0.0; horizon])).collect(),
        }
    }

    /// Worst per-step residual of the electric energy balance.
    pub fn electric_balance_residual(&self, hub: &HubSpec) -> f64 {
        let horizon = hub.l_p.len();
        let mut worst = 0.0_f64;
        for t in 0..horizon {
            let mut lhs = self.e_out[t] - self.e_in[t];
            for (dev, u) in hub.devices.iter().zip(self.u.iter()) {
                for (k, ch) in dev.channel_map.iter().enumerate() {
                    match ch {
                        Channel::POut => lhs += u[k][t],
                        Channel::PIn => lhs -= u[k][t],
                        _ => {}
                    }
                }
            }
            for series in self.p_tr.values() {
                lhs += series[t];
            }
            worst = worst.max((lhs - hub.l_p[t]).abs());
        }
        worst
    }

    /// Worst per-step residual of the thermal energy balance.
    pub fn thermal_balance_residual(&self, hub: &HubSpec) -> f64 {
        let horizon = hub.l_q.len();
        let mut worst = 0.0_f64;
        for t in 0..horizon {
            let mut lhs = 0.0;
            for (dev, u) in hub.devices.iter().zip(self.u.iter()) {
                for (k, ch) in dev.channel_map.iter().enumerate() {
                    match ch {
                        Channel::QOut => lhs += u[k][t],
                        Channel::QIn => lhs -= u[k][t],
                        _ => {}
                    }
                }
            }
            worst = worst.max((lhs - hub.l_q[t]).abs());
        }
        worst
    }
}

/// Dispatch of the network over the horizon. Powers in kW, voltages and
/// angles in p.u., keyed by bus/line id.
#[derive(Debug, Clone)]
pub struct NetworkDecision {
    pub p_mg: BTreeMap<usize, Vec<f64>>,
    pub v: BTreeMap<usize, Vec<f64>>,
    pub theta: BTreeMap<usize, Vec<f64>>,
    pub f_p: BTreeMap<usize, Vec<f64>>,
    pub f_q: BTreeMap<usize, Vec<f64>>,
    pub w: BTreeMap<usize, Vec<f64>>,
}

impl NetworkDecision {
    pub fn total_loss_kw(&self, t: usize) -> f64 {
        self.w.values().map(|s| s[t]).sum()
    }

    /// Residual of the summed nodal balances: total import minus demand,
    /// hub injections and losses, per step [kW].
    pub fn global_balance_residual(
        &self,
        net: &NetworkSpec,
        p_net_by_hub: &BTreeMap<usize, Vec<f64>>,
        t: usize,
    ) -> f64 {
        let imports: f64 = self.p_mg.values().map(|s| s[t]).sum();
        let demand: f64 = net.buses.iter().map(|b| b.f_p[t]).sum();
        let injections: f64 = p_net_by_hub.values().map(|s| s[t]).sum();
        let losses = self.total_loss_kw(t);
        imports - demand - injections - losses
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("network graph is not connected")]
    Disconnected,
    #[error("network has no main-grid bus")]
    NoMainGrid,
    #[error("degenerate flow range for loss fit")]
    DegenerateRange,
}

/// Canonical polyhedral system `{x | G x <= h, A x = b}`.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub n: usize,
    pub g: CscMatrix,
    pub h: Vec<f64>,
    pub a: CscMatrix,
    pub b: Vec<f64>,
}

/// Column range of one time series: column of step `t` is `start + t`.
#[derive(Debug, Clone, Copy)]
pub struct SeriesRange {
    pub start: usize,
    pub len: usize,
}

impl SeriesRange {
    pub fn at(&self, t: usize) -> usize {
        debug_assert!(t < self.len);
        self.start + t
    }
}

/// Variable layout of one device inside a hub vector.
#[derive(Debug, Clone)]
pub struct DeviceVars {
    /// States x_1..x_T, state-major.
    pub x_start: usize,
    pub nx: usize,
    /// Inputs u_0..u_{T-1}, input-major.
    pub u_start: usize,
    pub nu: usize,
    pub horizon: usize,
}

impl DeviceVars {
    /// Column of state `s` at step `t` in 1..=T.
    pub fn x(&self, s: usize, t: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&t));
        self.x_start + s * self.horizon + (t - 1)
    }

    /// Column of input `k` at step `t` in 0..T.
    pub fn u(&self, k: usize, t: usize) -> usize {
        debug_assert!(t < self.horizon);
        self.u_start + k * self.horizon + t
    }
}

/// Index map over a stacked hub variable vector.
#[derive(Debug, Clone)]
pub struct HubVarIndex {
    pub devices: Vec<DeviceVars>,
    pub e_in: SeriesRange,
    pub e_out: SeriesRange,
    pub gas: SeriesRange,
    pub p_net: SeriesRange,
    /// Trade series per partner hub, in this hub's own frame.
    pub trades: BTreeMap<usize, SeriesRange>,
    pub n: usize,
    pub horizon: usize,
}

impl HubVarIndex {
    pub fn new(hub: &HubSpec, partners: &[usize], horizon: usize) -> Self {
        let mut cursor = 0usize;
        let mut devices = Vec::with_capacity(hub.devices.len());
        for dev in &hub.devices {
            let dv = DeviceVars {
                x_start: cursor,
                nx: dev.num_states(),
                u_start: cursor + dev.num_states() * horizon,
                nu: dev.num_inputs(),
                horizon,
            };
            cursor += (dev.num_states() + dev.num_inputs()) * horizon;
            devices.push(dv);
        }
        let mut series = |cursor: &mut usize| {
            let r = SeriesRange {
                start: *cursor,
                len: horizon,
            };
            *cursor += horizon;
            r
        };
        let e_in = series(&mut cursor);
        let e_out = series(&mut cursor);
        let gas = series(&mut cursor);
        let p_net = series(&mut cursor);
        let mut trades = BTreeMap::new();
        for &j in partners {
            trades.insert(j, series(&mut cursor));
        }
        HubVarIndex {
            devices,
            e_in,
            e_out,
            gas,
            p_net,
            trades,
            n: cursor,
            horizon,
        }
    }

    /// Columns of all trade variables, partner-major then time. This is the
    /// row order of the tariff sensitivity blocks.
    pub fn trade_columns(&self) -> Vec<usize> {
        let mut cols = Vec::with_capacity(self.trades.len() * self.horizon);
        for range in self.trades.values() {
            for t in 0..self.horizon {
                cols.push(range.at(t));
            }
        }
        cols
    }

    pub fn extract_decision(&self, x: &[f64], hub: &HubSpec) -> HubDecision {
        let horizon = self.horizon;
        let mut xs = Vec::with_capacity(hub.devices.len());
        let mut us = Vec::with_capacity(hub.devices.len());
        for (dev, dv) in hub.devices.iter().zip(self.devices.iter()) {
            let x0 = dev.initial_state();
            let mut dev_x = vec![vec![0.0; horizon + 1]; dv.nx];
            for s in 0..dv.nx {
                dev_x[s][0] = x0[s];
                for t in 1..=horizon {
                    dev_x[s][t] = x[dv.x(s, t)];
                }
            }
            let mut dev_u = vec![vec![0.0; horizon]; dv.nu];
            for k in 0..dv.nu {
                for t in 0..horizon {
                    dev_u[k][t] = x[dv.u(k, t)];
                }
            }
            xs.push(dev_x);
            us.push(dev_u);
        }
        let series = |r: &SeriesRange| (0..horizon).map(|t| x[r.at(t)]).collect::<Vec<f64>>();
        HubDecision {
            x: xs,
            u: us,
            e_in: series(&self.e_in),
            e_out: series(&self.e_out),
            g: series(&self.gas),
            p_net: series(&self.p_net),
            p_tr: self.trades.iter().map(|(&j, r)| (j, series(r))).collect(),
        }
    }
}

#[derive(Debug)]
pub struct HubSystem {
    pub sys: ConstraintSystem,
    pub index: HubVarIndex,
}

pub fn validate_hub(hub: &HubSpec, horizon: usize) -> Result<(), ModelError> {
    if hub.l_p.len() != horizon || hub.l_q.len() != horizon {
        return Err(ModelError::Dimension(format!(
            "hub {}: demand series must have length {horizon}",
            hub.id
        )));
    }
    if hub.l_p.iter().chain(hub.l_q.iter()).any(|&v| v < 0.0) {
        return Err(ModelError::Invalid(format!(
            "hub {}: demands must be nonnegative",
            hub.id
        )));
    }
    if !hub.disturbances.is_empty() && hub.disturbances.len() != hub.devices.len() {
        return Err(ModelError::Dimension(format!(
            "hub {}: {} disturbance series for {} devices",
            hub.id,
            hub.disturbances.len(),
            hub.devices.len()
        )));
    }
    for (di, dev) in hub.devices.iter().enumerate() {
        let nx = dev.num_states();
        let nu = dev.num_inputs();
        if dev.a.len() != nx || dev.a.iter().any(|r| r.len() != nx) {
            return Err(ModelError::Dimension(format!(
                "hub {} device {}: A must be {nx}x{nx}",
                hub.id, dev.id
            )));
        }
        if dev.b.len() != nx || dev.b.iter().any(|r| r.len() != nu) {
            return Err(ModelError::Dimension(format!(
                "hub {} device {}: B must be {nx}x{nu}",
                hub.id, dev.id
            )));
        }
        let nd = dev.num_disturbances();
        if dev.d.len() != nx || dev.d.iter().any(|r| r.len() != nd) {
            return Err(ModelError::Dimension(format!(
                "hub {} device {}: D rows must match the state count",
                hub.id, dev.id
            )));
        }
        if dev.channel_map.len() != nu {
            return Err(ModelError::Dimension(format!(
                "hub {} device {}: every input entry needs exactly one channel tag",
                hub.id, dev.id
            )));
        }
        for &(lo, hi) in &dev.x_bounds {
            if lo > hi {
                return Err(ModelError::Invalid(format!(
                    "hub {} device {}: state bound lower > upper",
                    hub.id, dev.id
                )));
            }
        }
        for (k, ib) in dev.u_bounds.iter().enumerate() {
            if !ib.lo.check_len(horizon) || !ib.hi.check_len(horizon) {
                return Err(ModelError::Dimension(format!(
                    "hub {} device {} input {k}: bound series must have length {horizon}",
                    hub.id, dev.id
                )));
            }
            for t in 0..horizon {
                if ib.lo.at(t) > ib.hi.at(t) {
                    return Err(ModelError::Invalid(format!(
                        "hub {} device {} input {k}: bound lower > upper at step {t}",
                        hub.id, dev.id
                    )));
                }
            }
        }
        if let Some(x0) = &dev.x_init {
            if x0.len() != nx {
                return Err(ModelError::Dimension(format!(
                    "hub {} device {}: x_init length",
                    hub.id, dev.id
                )));
            }
        }
        if nx > 0 && nd > 0 {
            if hub.disturbances.is_empty() {
                return Err(ModelError::Dimension(format!(
                    "hub {} device {}: disturbance series required",
                    hub.id, dev.id
                )));
            }
            let series = &hub.disturbances[di];
            if series.len() != horizon || series.iter().any(|s| s.len() != nd) {
                return Err(ModelError::Dimension(format!(
                    "hub {} device {}: disturbance series must be {horizon}x{nd}",
                    hub.id, dev.id
                )));
            }
        }
    }
    Ok(())
}

pub fn validate_prices(prices: &PriceSet, horizon: usize) -> Result<(), ModelError> {
    for (name, s) in [
        ("c_e_out", &prices.c_e_out),
        ("c_e_in", &prices.c_e_in),
        ("c_g_out", &prices.c_g_out),
        ("c_mg", &prices.c_mg),
    ] {
        if s.len() != horizon {
            return Err(ModelError::Dimension(format!(
                "price series {name} must have length {horizon}"
            )));
        }
        if s.iter().any(|&v| v < 0.0) {
            return Err(ModelError::Invalid(format!(
                "price series {name} must be nonnegative"
            )));
        }
    }
    for t in 0..horizon {
        if prices.c_e_in[t] > prices.c_e_out[t] {
            return Err(ModelError::Invalid(format!(
                "feed-in price exceeds purchase price at step {t}"
            )));
        }
    }
    Ok(())
}

pub fn validate_network(net: &NetworkSpec, horizon: usize) -> Result<(), ModelError> {
    if net.buses.is_empty() {
        return Err(ModelError::Invalid("network has no buses".into()));
    }
    if net.s_base_kw <= 0.0 {
        return Err(ModelError::Invalid("s_base_kw must be positive".into()));
    }
    if net.polygon_segments < 4 {
        return Err(ModelError::Invalid(
            "polygon approximation needs at least 4 segments".into(),
        ));
    }
    if net.main_grid_positions().is_empty() {
        return Err(ModelError::NoMainGrid);
    }
    for bus in &net.buses {
        if bus.f_p.len() != horizon {
            return Err(ModelError::Dimension(format!(
                "bus {}: demand series must have length {horizon}",
                bus.id
            )));
        }
    }
    for line in &net.lines {
        for (end, name) in [(line.from_bus, "from_bus"), (line.to_bus, "to_bus")] {
            if net.bus_position(end).is_none() {
                return Err(ModelError::Invalid(format!(
                    "line {}: {name} {end} does not exist",
                    line.id
                )));
            }
        }
        if line.m_loss < 0.0 || line.q_loss_kw < 0.0 || line.f_max_kw <= 0.0 {
            return Err(ModelError::Invalid(format!(
                "line {}: loss coefficients must be nonnegative and capacity positive",
                line.id
            )));
        }
    }
    // Connectivity by breadth-first search.
    let n = net.buses.len();
    let mut adj = vec![Vec::new(); n];
    for line in &net.lines {
        let a = net.bus_position(line.from_bus).unwrap();
        let b = net.bus_position(line.to_bus).unwrap();
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &u in &adj[v] {
            if !seen[u] {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    if seen.iter().any(|&s| !s) {
        return Err(ModelError::Disconnected);
    }
    Ok(())
}

/// Builds the canonical constraint system of one hub.
///
/// Equality rows, in order: device dynamics (device-major, state-major,
/// time-major), electric balance per step, thermal balance per step, gas
/// definition per step, net-injection definition per step. Inequality rows:
/// per device state upper/lower bounds then input upper/lower bounds
/// (non-finite bounds are skipped), then `e_in >= 0`, `e_out >= 0`,
/// `g >= 0`.
pub fn assemble_hub_constraints(
    hub: &HubSpec,
    partners: &[usize],
    horizon: usize,
) -> Result<HubSystem, ModelError> {
    if horizon == 0 {
        return Err(ModelError::Invalid("horizon must be at least 1".into()));
    }
    validate_hub(hub, horizon)?;
    let index = HubVarIndex::new(hub, partners, horizon);
    let n = index.n;

    let mut a_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut b_rhs: Vec<f64> = Vec::new();
    let mut row = 0usize;

    // Device dynamics: x[t+1] - A x[t] - B u[t] = D d[t], with A x_0 folded
    // into the right-hand side at t = 0.
    for (di, dev) in hub.devices.iter().enumerate() {
        let dv = &index.devices[di];
        let x0 = dev.initial_state();
        for s in 0..dv.nx {
            for t in 0..horizon {
                a_trip.push((row, dv.x(s, t + 1), 1.0));
                for sp in 0..dv.nx {
                    let coeff = dev.a[s][sp];
                    if coeff != 0.0 && t > 0 {
                        a_trip.push((row, dv.x(sp, t), -coeff));
                    }
                }
                for k in 0..dv.nu {
                    let coeff = dev.b[s][k];
                    if coeff != 0.0 {
                        a_trip.push((row, dv.u(k, t), -coeff));
                    }
                }
                let mut rhs = 0.0;
                if t == 0 {
                    for sp in 0..dv.nx {
                        rhs += dev.a[s][sp] * x0[sp];
                    }
                }
                if !hub.disturbances.is_empty() && dev.num_disturbances() > 0 {
                    let dist = &hub.disturbances[di];
                    for (dd, coeff) in dist[t].iter().zip(dev.d[s].iter()) {
                        rhs += coeff * dd;
                    }
                }
                b_rhs.push(rhs);
                row += 1;
            }
        }
    }

    // Electric balance: e_out - e_in + sum(u_p_out - u_p_in) + sum_j p_tr = L_p.
    for t in 0..horizon {
        a_trip.push((row, index.e_out.at(t), 1.0));
        a_trip.push((row, index.e_in.at(t), -1.0));
        for (di, dev) in hub.devices.iter().enumerate() {
            let dv = &index.devices[di];
            for (k, ch) in dev.channel_map.iter().enumerate() {
                match ch {
                    Channel::POut => a_trip.push((row, dv.u(k, t), 1.0)),
                    Channel::PIn => a_trip.push((row, dv.u(k, t), -1.0)),
                    _ => {}
                }
            }
        }
        for range in index.trades.values() {
            a_trip.push((row, range.at(t), 1.0));
        }
        b_rhs.push(hub.l_p[t]);
        row += 1;
    }

    // Thermal balance: sum(u_q_out - u_q_in) = L_q.
    for t in 0..horizon {
        for (di, dev) in hub.devices.iter().enumerate() {
            let dv = &index.devices[di];
            for (k, ch) in dev.channel_map.iter().enumerate() {
                match ch {
                    Channel::QOut => a_trip.push((row, dv.u(k, t), 1.0)),
                    Channel::QIn => a_trip.push((row, dv.u(k, t), -1.0)),
                    _ => {}
                }
            }
        }
        b_rhs.push(hub.l_q[t]);
        row += 1;
    }

    // Gas definition: g - sum(u_g_in) = 0.
    for t in 0..horizon {
        a_trip.push((row, index.gas.at(t), 1.0));
        for (di, dev) in hub.devices.iter().enumerate() {
            let dv = &index.devices[di];
            for (k, ch) in dev.channel_map.iter().enumerate() {
                if *ch == Channel::GIn {
                    a_trip.push((row, dv.u(k, t), -1.0));
                }
            }
        }
        b_rhs.push(0.0);
        row += 1;
    }

    // Net injection: p_net - e_out + e_in - sum_j p_tr = 0.
    for t in 0..horizon {
        a_trip.push((row, index.p_net.at(t), 1.0));
        a_trip.push((row, index.e_out.at(t), -1.0));
        a_trip.push((row, index.e_in.at(t), 1.0));
        for range in index.trades.values() {
            a_trip.push((row, range.at(t), -1.0));
        }
        b_rhs.push(0.0);
        row += 1;
    }
    let m_eq = row;

    let mut g_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut h_rhs: Vec<f64> = Vec::new();
    let mut grow = 0usize;

    for (di, dev) in hub.devices.iter().enumerate() {
        let dv = &index.devices[di];
        for s in 0..dv.nx {
            let (lo, hi) = dev.x_bounds[s];
            for t in 1..=horizon {
                if hi.is_finite() {
                    g_trip.push((grow, dv.x(s, t), 1.0));
                    h_rhs.push(hi);
                    grow += 1;
                }
                if lo.is_finite() {
                    g_trip.push((grow, dv.x(s, t), -1.0));
                    h_rhs.push(-lo);
                    grow += 1;
                }
            }
        }
        for k in 0..dv.nu {
            let ib = &dev.u_bounds[k];
            for t in 0..horizon {
                let hi = ib.hi.at(t);
                let lo = ib.lo.at(t);
                if hi.is_finite() {
                    g_trip.push((grow, dv.u(k, t), 1.0));
                    h_rhs.push(hi);
                    grow += 1;
                }
                if lo.is_finite() {
                    g_trip.push((grow, dv.u(k, t), -1.0));
                    h_rhs.push(-lo);
                    grow += 1;
                }
            }
        }
    }
    for t in 0..horizon {
        g_trip.push((grow, index.e_in.at(t), -1.0));
        h_rhs.push(0.0);
        grow += 1;
    }
    for t in 0..horizon {
        g_trip.push((grow, index.e_out.at(t), -1.0));
        h_rhs.push(0.0);
        grow += 1;
    }
    for t in 0..horizon {
        g_trip.push((grow, index.gas.at(t), -1.0));
        h_rhs.push(0.0);
        grow += 1;
    }

    let sys = ConstraintSystem {
        n,
        g: CscMatrix::from_triplets(grow, n, &g_trip),
        h: h_rhs,
        a: CscMatrix::from_triplets(m_eq, n, &a_trip),
        b: b_rhs,
    };
    Ok(HubSystem { sys, index })
}

/// Variable layout of the network vector.
#[derive(Debug, Clone)]
pub struct NetVarIndex {
    /// Main-grid exchange per main-grid bus position [p.u.].
    pub p_mg: BTreeMap<usize, SeriesRange>,
    pub v: Vec<SeriesRange>,
    pub theta: Vec<SeriesRange>,
    pub f_p: Vec<SeriesRange>,
    pub f_q: Vec<SeriesRange>,
    pub f_plus: Vec<SeriesRange>,
    pub f_minus: Vec<SeriesRange>,
    pub w: Vec<SeriesRange>,
    /// Local copies of each hub's net injection [kW], by hub position.
    pub p_net: Vec<SeriesRange>,
    pub n: usize,
    pub horizon: usize,
}

impl NetVarIndex {
    fn new(net: &NetworkSpec, num_hubs: usize, horizon: usize) -> Self {
        let mut cursor = 0usize;
        let mut series = |cursor: &mut usize| {
            let r = SeriesRange {
                start: *cursor,
                len: horizon,
            };
            *cursor += horizon;
            r
        };
        let mut p_mg = BTreeMap::new();
        for pos in net.main_grid_positions() {
            p_mg.insert(pos, series(&mut cursor));
        }
        let v: Vec<_> = (0..net.buses.len()).map(|_| series(&mut cursor)).collect();
        let theta: Vec<_> = (0..net.buses.len()).map(|_| series(&mut cursor)).collect();
        let f_p: Vec<_> = (0..net.lines.len()).map(|_| series(&mut cursor)).collect();
        let f_q: Vec<_> = (0..net.lines.len()).map(|_| series(&mut cursor)).collect();
        let f_plus: Vec<_> = (0..net.lines.len()).map(|_| series(&mut cursor)).collect();
        let f_minus: Vec<_> = (0..net.lines.len()).map(|_| series(&mut cursor)).collect();
        let w: Vec<_> = (0..net.lines.len()).map(|_| series(&mut cursor)).collect();
        let p_net: Vec<_> = (0..num_hubs).map(|_| series(&mut cursor)).collect();
        NetVarIndex {
            p_mg,
            v,
            theta,
            f_p,
            f_q,
            f_plus,
            f_minus,
            w,
            p_net,
            n: cursor,
            horizon,
        }
    }

    pub fn extract_decision(&self, x: &[f64], net: &NetworkSpec) -> NetworkDecision {
        let horizon = self.horizon;
        let s_base = net.s_base_kw;
        let series = |r: &SeriesRange, scale: f64| {
            (0..horizon)
                .map(|t| x[r.at(t)] * scale)
                .collect::<Vec<f64>>()
        };
        let mut p_mg = BTreeMap::new();
        for (pos, r) in &self.p_mg {
            p_mg.insert(net.buses[*pos].id, series(r, s_base));
        }
        let mut v = BTreeMap::new();
        let mut theta = BTreeMap::new();
        for (pos, bus) in net.buses.iter().enumerate() {
            v.insert(bus.id, series(&self.v[pos], 1.0));
            theta.insert(bus.id, series(&self.theta[pos], 1.0));
        }
        let mut f_p = BTreeMap::new();
        let mut f_q = BTreeMap::new();
        let mut w = BTreeMap::new();
        for (pos, line) in net.lines.iter().enumerate() {
            f_p.insert(line.id, series(&self.f_p[pos], s_base));
            f_q.insert(line.id, series(&self.f_q[pos], s_base));
            w.insert(line.id, series(&self.w[pos], s_base));
        }
        NetworkDecision {
            p_mg,
            v,
            theta,
            f_p,
            f_q,
            w,
        }
    }
}

#[derive(Debug)]
pub struct NetSystem {
    pub sys: ConstraintSystem,
    pub index: NetVarIndex,
}

/// Builds the network operator's canonical constraint system.
///
/// Power-flow quantities are per-unit internally; hub injections stay in kW
/// and are rescaled inside the nodal balances. The conic line limit is
/// replaced by an inscribed regular polygon (conservative), and `|f_p|` in
/// the loss model by the split `f_p = f_plus - f_minus`.
pub fn assemble_network_constraints(
    net: &NetworkSpec,
    hub_buses: &[usize],
    horizon: usize,
) -> Result<NetSystem, ModelError> {
    if horizon == 0 {
        return Err(ModelError::Invalid("horizon must be at least 1".into()));
    }
    validate_network(net, horizon)?;
    for &bus in hub_buses {
        if net.bus_position(bus).is_none() {
            return Err(ModelError::Invalid(format!(
                "hub references nonexistent bus {bus}"
            )));
        }
    }
    let index = NetVarIndex::new(net, hub_buses.len(), horizon);
    let inv_base = 1.0 / net.s_base_kw;

    let mut a_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut b_rhs: Vec<f64> = Vec::new();
    let mut row = 0usize;

    // Nodal balance per bus and step, with half of each incident line's
    // loss allocated to the bus:
    // p_mg - sum_l orient*f_p - 0.5 sum_l w - sum_hubs p_net/s_base = F_p/s_base.
    for t in 0..horizon {
        for (pos, bus) in net.buses.iter().enumerate() {
            if let Some(r) = index.p_mg.get(&pos) {
                a_trip.push((row, r.at(t), 1.0));
            }
            for (lpos, line) in net.lines.iter().enumerate() {
                let from = net.bus_position(line.from_bus).unwrap();
                let to = net.bus_position(line.to_bus).unwrap();
                if from == pos {
                    a_trip.push((row, index.f_p[lpos].at(t), -1.0));
                    a_trip.push((row, index.w[lpos].at(t), -0.5));
                } else if to == pos {
                    a_trip.push((row, index.f_p[lpos].at(t), 1.0));
                    a_trip.push((row, index.w[lpos].at(t), -0.5));
                }
            }
            for (hpos, &hbus) in hub_buses.iter().enumerate() {
                if net.bus_position(hbus).unwrap() == pos {
                    a_trip.push((row, index.p_net[hpos].at(t), -inv_base));
                }
            }
            b_rhs.push(bus.f_p[t] * inv_base);
            row += 1;
        }
    }

    // Line flow definitions, split linkage and loss model per line and step.
    for t in 0..horizon {
        for (lpos, line) in net.lines.iter().enumerate() {
            let from = net.bus_position(line.from_bus).unwrap();
            let to = net.bus_position(line.to_bus).unwrap();
            // f_p = B (th_b - th_c) - G (v_b - v_c)
            a_trip.push((row, index.f_p[lpos].at(t), 1.0));
            a_trip.push((row, index.theta[from].at(t), -line.b_pu));
            a_trip.push((row, index.theta[to].at(t), line.b_pu));
            a_trip.push((row, index.v[from].at(t), line.g_pu));
            a_trip.push((row, index.v[to].at(t), -line.g_pu));
            b_rhs.push(0.0);
            row += 1;
            // f_q = G (th_b - th_c) + B (v_b - v_c)
            a_trip.push((row, index.f_q[lpos].at(t), 1.0));
            a_trip.push((row, index.theta[from].at(t), -line.g_pu));
            a_trip.push((row, index.theta[to].at(t), line.g_pu));
            a_trip.push((row, index.v[from].at(t), -line.b_pu));
            a_trip.push((row, index.v[to].at(t), line.b_pu));
            b_rhs.push(0.0);
            row += 1;
            // f_p = f_plus - f_minus
            a_trip.push((row, index.f_p[lpos].at(t), 1.0));
            a_trip.push((row, index.f_plus[lpos].at(t), -1.0));
            a_trip.push((row, index.f_minus[lpos].at(t), 1.0));
            b_rhs.push(0.0);
            row += 1;
            // w = M (f_plus + f_minus) + Q
            a_trip.push((row, index.w[lpos].at(t), 1.0));
            a_trip.push((row, index.f_plus[lpos].at(t), -line.m_loss));
            a_trip.push((row, index.f_minus[lpos].at(t), -line.m_loss));
            b_rhs.push(line.q_loss_kw * inv_base);
            row += 1;
        }
    }

    // Reference anchor on the first main-grid bus.
    if net.anchor_reference {
        let anchor = net.main_grid_positions()[0];
        for t in 0..horizon {
            a_trip.push((row, index.theta[anchor].at(t), 1.0));
            b_rhs.push(0.0);
            row += 1;
            a_trip.push((row, index.v[anchor].at(t), 1.0));
            b_rhs.push(1.0);
            row += 1;
        }
    }
    let m_eq = row;

    let mut g_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut h_rhs: Vec<f64> = Vec::new();
    let mut grow = 0usize;

    // Voltage and angle boxes.
    for t in 0..horizon {
        for (pos, bus) in net.buses.iter().enumerate() {
            g_trip.push((grow, index.theta[pos].at(t), 1.0));
            h_rhs.push(bus.theta_limits.1);
            grow += 1;
            g_trip.push((grow, index.theta[pos].at(t), -1.0));
            h_rhs.push(-bus.theta_limits.0);
            grow += 1;
            g_trip.push((grow, index.v[pos].at(t), 1.0));
            h_rhs.push(bus.v_limits.1);
            grow += 1;
            g_trip.push((grow, index.v[pos].at(t), -1.0));
            h_rhs.push(-bus.v_limits.0);
            grow += 1;
        }
    }

    // Inscribed polygon capacity and split nonnegativity.
    let segments = net.polygon_segments;
    let shrink = (std::f64::consts::PI / segments as f64).cos();
    for t in 0..horizon {
        for (lpos, line) in net.lines.iter().enumerate() {
            let cap = line.f_max_kw * inv_base;
            for k in 0..segments {
                let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / segments as f64;
                g_trip.push((grow, index.f_p[lpos].at(t), phi.cos()));
                g_trip.push((grow, index.f_q[lpos].at(t), phi.sin()));
                h_rhs.push(cap * shrink);
                grow += 1;
            }
            g_trip.push((grow, index.f_plus[lpos].at(t), -1.0));
            h_rhs.push(0.0);
            grow += 1;
            g_trip.push((grow, index.f_minus[lpos].at(t), -1.0));
            h_rhs.push(0.0);
            grow += 1;
        }
    }

    let sys = ConstraintSystem {
        n: index.n,
        g: CscMatrix::from_triplets(grow, index.n, &g_trip),
        h: h_rhs,
        a: CscMatrix::from_triplets(m_eq, index.n, &a_trip),
        b: b_rhs,
    };
    Ok(NetSystem { sys, index })
}

/// Least-squares fit of the linear loss model `w = M |f| + Q` against the
/// quadratic reference curve `r f^2`, sampled uniformly on `flow_range`,
/// with both coefficients clipped at zero. When the unconstrained optimum
/// leaves the nonnegative quadrant, the best boundary fit is returned (the
/// remaining coefficient is refit rather than left at its joint value).
pub fn fit_loss_coefficients(
    r: f64,
    flow_range: (f64, f64),
    samples: usize,
) -> Result<(f64, f64), ModelError> {
    let (lo, hi) = flow_range;
    if samples < 2 || hi <= lo {
        return Err(ModelError::DegenerateRange);
    }
    let mut s_aa = 0.0;
    let mut s_a = 0.0;
    let mut s_1 = 0.0;
    let mut s_ay = 0.0;
    let mut s_y = 0.0;
    let mut points = Vec::with_capacity(samples);
    for k in 0..samples {
        let f = lo + (hi - lo) * k as f64 / (samples - 1) as f64;
        let a = f.abs();
        let y = r * f * f;
        s_aa += a * a;
        s_a += a;
        s_1 += 1.0;
        s_ay += a * y;
        s_y += y;
    }
    for k in 0..samples {
        let f = lo + (hi - lo) * k as f64 / (samples - 1) as f64;
        points.push((f.abs(), r * f * f));
    }
    let sse = |m: f64, q: f64| -> f64 {
        points
            .iter()
            .map(|&(a, y)| {
                let e = m * a + q - y;
                e * e
            })
            .sum()
    };
    let det = s_aa * s_1 - s_a * s_a;
    if det.abs() > 1e-12 {
        let m = (s_ay * s_1 - s_a * s_y) / det;
        let q = (s_aa * s_y - s_a * s_ay) / det;
        if m >= 0.0 && q >= 0.0 {
            return Ok((m, q));
        }
    }
    // Boundary candidates of the nonnegative quadrant.
    let m_only = if s_aa > 0.0 {
        (s_ay / s_aa).max(0.0)
    } else {
        0.0
    };
    let q_only = (s_y / s_1).max(0.0);
    if sse(m_only, 0.0) <= sse(0.0, q_only) {
        Ok((m_only, 0.0))
    } else {
        Ok((0.0, q_only))
    }
}
