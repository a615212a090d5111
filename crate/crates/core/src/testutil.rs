//! Shared fixtures for unit tests: tiny radial networks and minimal hubs.

use crate::model::{BusSpec, Cap, Channel, DeviceModel, HubSpec, InputBound, LineSpec, NetworkSpec, PriceSet};

pub fn tiny_network(horizon: usize, buses: usize) -> NetworkSpec {
    let mut bus_list = Vec::new();
    for id in 1..=buses {
        bus_list.push(BusSpec {
            id,
            theta_limits: (-0.75, 0.75),
            v_limits: (0.95, 1.05),
            f_p: vec![0.0; horizon],
            is_main_grid: id == 1,
        });
    }
    let lines = (2..=buses)
        .map(|id| LineSpec {
            id: id - 1,
            from_bus: id - 1,
            to_bus: id,
            b_pu: 10.0,
            g_pu: 0.0,
            f_max_kw: 5000.0,
            m_loss: 0.02,
            q_loss_kw: 0.0,
        })
        .collect();
    NetworkSpec {
        buses: bus_list,
        lines,
        s_base_kw: 1000.0,
        polygon_segments: 8,
        anchor_reference: true,
    }
}

pub fn consumer_hub(id: &str, bus: usize, demand: Vec<f64>) -> HubSpec {
    let horizon = demand.len();
    HubSpec {
        id: id.into(),
        bus,
        devices: vec![],
        l_p: demand,
        l_q: vec![0.0; horizon],
        disturbances: vec![],
    }
}

/// Hub with a zero-marginal-cost generator of the given capacity.
pub fn producer_hub(id: &str, bus: usize, horizon: usize, cap: f64) -> HubSpec {
    HubSpec {
        id: id.into(),
        bus,
        devices: vec![DeviceModel {
            id: "gen".into(),
            a: vec![],
            b: vec![],
            d: vec![],
            x_bounds: vec![],
            u_bounds: vec![InputBound {
                lo: Cap::Const(0.0),
                hi: Cap::Const(cap),
            }],
            channel_map: vec![Channel::POut],
            x_init: None,
        }],
        l_p: vec![0.0; horizon],
        l_q: vec![0.0; horizon],
        disturbances: vec![],
    }
}

/// Hub with a gas generator: electricity at fuel cost c_g / efficiency.
pub fn gas_producer_hub(id: &str, bus: usize, horizon: usize, cap: f64, eta: f64) -> HubSpec {
    HubSpec {
        id: id.into(),
        bus,
        devices: vec![DeviceModel {
            id: "genset".into(),
            a: vec![vec![0.0]],
            b: vec![vec![eta, -1.0]],
            d: vec![vec![]],
            x_bounds: vec![(0.0, 0.0)],
            u_bounds: vec![
                InputBound {
                    lo: Cap::Const(0.0),
                    hi: Cap::Const(cap / eta),
                },
                InputBound {
                    lo: Cap::Const(0.0),
                    hi: Cap::Const(cap),
                },
            ],
            channel_map: vec![Channel::GIn, Channel::POut],
            x_init: None,
        }],
        l_p: vec![0.0; horizon],
        l_q: vec![0.0; horizon],
        disturbances: vec![],
    }
}

pub fn flat_prices(horizon: usize) -> PriceSet {
    PriceSet {
        c_e_out: vec![0.25; horizon],
        c_e_in: vec![0.10; horizon],
        c_g_out: vec![0.115; horizon],
        c_mg: vec![0.25; horizon],
    }
}
