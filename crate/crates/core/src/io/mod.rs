//! Scenario ingestion and result export.
//!
//! Scenarios are JSON documents holding the network, the hubs, prices, the
//! horizon layout and algorithm parameters (all parameters optional, with
//! the experiment defaults applied). Results leave as plain CSV tables with
//! a fixed column order, ready for plotting. See `docs/scenario-schema.md`.

pub mod builtin;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fair_pricing::{EntryKind, Participant};
use crate::model::{self, HubSpec, NetworkSpec, PriceSet};
use crate::runner::RunOutputs;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Horizon {
    /// Steps per optimization window.
    pub t: usize,
    /// Step length in hours; energies and powers interchange at 1.0.
    #[serde(default = "default_dt")]
    pub dt_hours: f64,
    /// Number of horizon windows in the simulation.
    #[serde(default = "default_days")]
    pub days: usize,
    /// Settlement period for bilateral prices, in steps.
    pub t_f: usize,
}

fn default_dt() -> f64 {
    1.0
}
fn default_days() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairAlgoConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_fair_tol")]
    pub tol: f64,
    #[serde(default = "d_fair_iters")]
    pub max_iter: usize,
    #[serde(default)]
    pub cap: Option<f64>,
    #[serde(default)]
    pub per_step: bool,
}

fn d_beta1() -> f64 {
    0.05
}
fn d_fair_tol() -> f64 {
    1e-10
}
fn d_fair_iters() -> usize {
    20_000
}

impl Default for FairAlgoConfig {
    fn default() -> Self {
        FairAlgoConfig {
            beta1: d_beta1(),
            tol: d_fair_tol(),
            max_iter: d_fair_iters(),
            cap: None,
            per_step: false,
        }
    }
}

/// Algorithm parameters with the reported experimental defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    /// Inner-loop tolerance on squared primal residuals.
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_w_max")]
    pub w_max: usize,
    /// Outer-loop tolerance on the collected-tariff change.
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_k_max")]
    pub k_max: usize,
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_alpha0")]
    pub alpha0: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_gamma0")]
    pub gamma0: f64,
    #[serde(default = "d_qp_tol")]
    pub qp_tol: f64,
    /// Tolerance of the no-trade baseline clearing; tighter than eps since
    /// baseline losses and costs feed audits.
    #[serde(default = "d_baseline_eps")]
    pub baseline_eps: f64,
    /// Tariff regularizer coefficient in the hypergradient (4 as printed,
    /// 2 for the naive derivative).
    #[serde(default = "d_reg_coeff")]
    pub reg_coeff: f64,
    #[serde(default)]
    pub fair: FairAlgoConfig,
}

fn d_eps() -> f64 {
    0.2
}
fn d_w_max() -> usize {
    100
}
fn d_sigma() -> f64 {
    0.2
}
fn d_k_max() -> usize {
    30
}
fn d_rho() -> f64 {
    1.0
}
fn d_alpha0() -> f64 {
    2e-6
}
fn d_beta() -> f64 {
    1.0
}
fn d_gamma0() -> f64 {
    0.01
}
fn d_qp_tol() -> f64 {
    1e-6
}
fn d_baseline_eps() -> f64 {
    1e-6
}
fn d_reg_coeff() -> f64 {
    4.0
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "d_schema")]
    pub schema_version: u32,
    pub horizon: Horizon,
    pub network: NetworkSpec,
    pub hubs: Vec<HubSpec>,
    pub prices: PriceSet,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
}

fn d_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported schema version {0} (supported: {SCHEMA_VERSION})")]
    Version(u32),
    #[error("{0}")]
    Model(#[from] model::ModelError),
}

impl Scenario {
    /// Total number of steps covered by the data series.
    pub fn total_steps(&self) -> usize {
        self.horizon.t * self.horizon.days
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Version(self.schema_version));
        }
        let h = &self.horizon;
        if h.t == 0 || h.days == 0 {
            return Err(ScenarioError::Schema {
                path: "horizon".into(),
                message: "t and days must be positive".into(),
            });
        }
        if h.t_f == 0 || h.t_f % h.t != 0 {
            return Err(ScenarioError::Schema {
                path: "horizon.t_f".into(),
                message: format!("t_f = {} must be a positive multiple of t = {}", h.t_f, h.t),
            });
        }
        if self.total_steps() % h.t_f != 0 {
            return Err(ScenarioError::Schema {
                path: "horizon.t_f".into(),
                message: format!(
                    "total steps {} must be a multiple of t_f = {}",
                    self.total_steps(),
                    h.t_f
                ),
            });
        }
        let steps = self.total_steps();
        model::validate_network(&self.network, steps)?;
        model::validate_prices(&self.prices, steps)?;
        let bus_ids: BTreeSet<usize> = self.network.buses.iter().map(|b| b.id).collect();
        let mut hub_ids = BTreeSet::new();
        for (i, hub) in self.hubs.iter().enumerate() {
            if !bus_ids.contains(&hub.bus) {
                return Err(ScenarioError::Schema {
                    path: format!("hubs[{i}].bus"),
                    message: format!("hub {} references nonexistent bus {}", hub.id, hub.bus),
                });
            }
            if !hub_ids.insert(hub.id.clone()) {
                return Err(ScenarioError::Schema {
                    path: format!("hubs[{i}].id"),
                    message: format!("duplicate hub id {}", hub.id),
                });
            }
            model::validate_hub(hub, steps)?;
        }
        Ok(())
    }
}

/// Loads and fully validates a scenario file, applying defaults for omitted
/// algorithm parameters.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let scenario: Scenario =
        serde_json::from_str(&raw).map_err(|e| ScenarioError::Schema {
            path: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Serializes a scenario back to disk (pretty, stable field order).
pub fn export_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(scenario).expect("scenario serializes");
    fs::write(path, json.as_bytes()).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

fn participant_label(p: &Participant) -> String {
    match p {
        Participant::Hub(i) => format!("hub{i}"),
        Participant::Network => "network".into(),
    }
}

/// Writes every result table of a run into `dir`. Deterministic content:
/// fixed column order, fixed row order, shortest-roundtrip float formatting.
pub fn export_results(run: &RunOutputs, dir: impl AsRef<Path>) -> std::io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = |name: &str, header: &str, body: &mut dyn FnMut(&mut Vec<u8>)| -> std::io::Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(header.as_bytes());
        buf.push(b'\n');
        body(&mut buf);
        let mut f = fs::File::create(dir.join(name))?;
        f.write_all(&buf)
    };

    w("tariffs.csv", "window,pair_i,pair_j,gamma", &mut |buf| {
        for (wi, win) in run.windows.iter().enumerate() {
            for (&(i, j), &g) in win.gamma.pair_values() {
                let _ = writeln!(buf, "{wi},{i},{j},{g}");
            }
        }
    })?;

    w("trades.csv", "window,pair_i,pair_j,t,kwh", &mut |buf| {
        for (wi, win) in run.windows.iter().enumerate() {
            for (&(i, j), series) in &win.trades {
                for (t, v) in series.iter().enumerate() {
                    let _ = writeln!(buf, "{wi},{i},{j},{t},{v}");
                }
            }
        }
    })?;

    w("net_hub_trades.csv", "window,hub,t,kwh", &mut |buf| {
        for (wi, win) in run.windows.iter().enumerate() {
            for (hub, series) in win.net_hub_trades.iter().enumerate() {
                for (t, v) in series.iter().enumerate() {
                    let _ = writeln!(buf, "{wi},{hub},{t},{v}");
                }
            }
        }
    })?;

    w("losses.csv", "window,line,t,w_kw,w_nt_kw", &mut |buf| {
        for (wi, win) in run.windows.iter().enumerate() {
            for (line, series) in &win.losses {
                let nt = &win.losses_nt[line];
                for (t, v) in series.iter().enumerate() {
                    let _ = writeln!(buf, "{wi},{line},{t},{v},{}", nt[t]);
                }
            }
        }
    })?;

    w(
        "costs.csv",
        "settlement,hub,j_nt,j_actual,d",
        &mut |buf| {
            for (si, s) in run.settlements.iter().enumerate() {
                for hub in 0..s.report.d.len() {
                    let _ = writeln!(
                        buf,
                        "{si},{hub},{},{},{}",
                        s.report.j_nt[hub], s.report.j_actual[hub], s.report.d[hub]
                    );
                }
            }
        },
    )?;

    w(
        "ledger.csv",
        "window,pair_i,pair_j,kind,payer,payee,energy_kwh,price,amount",
        &mut |buf| {
            for e in &run.ledger.entries {
                let kind = match e.kind {
                    EntryKind::Trade => "trade",
                    EntryKind::Tariff => "tariff",
                };
                let _ = writeln!(
                    buf,
                    "{},{},{},{kind},{},{},{},{},{}",
                    e.window,
                    e.pair.0,
                    e.pair.1,
                    participant_label(&e.payer),
                    participant_label(&e.payee),
                    e.energy_kwh,
                    e.price,
                    e.amount
                );
            }
        },
    )?;

    w(
        "trace_inner.csv",
        "window,outer_k,inner_iter,agent,residual_sq,objective",
        &mut |buf| {
            for (wi, win) in run.windows.iter().enumerate() {
                for row in &win.inner_trace {
                    let _ = writeln!(
                        buf,
                        "{wi},{},{},{},{},{}",
                        row.outer_k, row.iter, row.agent, row.residual_sq, row.objective
                    );
                }
            }
        },
    )?;

    w(
        "trace_outer.csv",
        "window,k,j_value,collected_tariff,loss_gap,recovery_gap,alpha",
        &mut |buf| {
            for (wi, win) in run.windows.iter().enumerate() {
                for row in &win.outer_trace {
                    let _ = writeln!(
                        buf,
                        "{wi},{},{},{},{},{},{}",
                        row.k,
                        row.j_value,
                        row.collected_tariff,
                        row.loss_gap,
                        row.recovery_gap,
                        row.alpha
                    );
                }
            }
        },
    )?;

    w(
        "summary.csv",
        "window,converged,outer_iterations,total_trades_kwh,system_cost,hub_cost_total,network_cost,tariff_collected",
        &mut |buf| {
            for (wi, win) in run.windows.iter().enumerate() {
                let _ = writeln!(
                    buf,
                    "{wi},{},{},{},{},{},{},{}",
                    win.converged,
                    win.outer_iterations,
                    win.total_trades_kwh,
                    win.system_cost,
                    win.hub_cost_total,
                    win.network_cost,
                    win.tariff_collected
                );
            }
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests;
