//! Loss-aware tariff design and market clearing for peer-to-peer energy
//! trading between multi-energy hubs on a distribution network.
//!
//! The engine solves a single-leader multi-follower game: a grid operator
//! sets per-pair trading tariffs by projected hypergradient descent, while
//! the hubs and the network operator clear the market underneath through
//! distributed consensus ADMM. After the dispatch is fixed, bilateral trade
//! prices are chosen to equalize the hubs' normalized cost reductions.
//!
//! Module map:
//! - [`model`] — domain types and constraint-matrix assembly for hubs and grid
//! - [`qp`] — embedded operator-splitting QP solver with dual extraction
//! - [`hub_opt`] / [`grid_opt`] — augmented-Lagrangian subproblems per agent
//! - [`admm`] — consensus-ADMM market clearing coordinator
//! - [`sensitivity`] — KKT differentiation of hub trades w.r.t. tariffs
//! - [`hypergrad`] — leader loop: hypergradient step, projection, termination
//! - [`fair_pricing`] — variance-minimizing bilateral trade prices, settlement
//! - [`io`] — scenario files, bundled data packs, result export
//! - [`oracle`] — centralized monolithic clearing used for cross-checks
//! - [`runner`] — rolling-horizon orchestration behind the CLI

pub mod admm;
pub mod fair_pricing;
pub mod grid_opt;
pub mod hub_opt;
pub mod hypergrad;
pub mod io;
pub mod model;
pub mod oracle;
pub mod qp;
pub mod runner;
pub mod sensitivity;
#[cfg(test)]
pub(crate) mod testutil;


