//! Distributed, event-triggered average state estimation for multi-agent
//! microgrids.
//!
//! Agents sit on a [`graph::CommGraph`], run the dynamic average consensus
//! protocol of [`consensus`], exchange send-on-delta messages ([`sod`]) over a
//! delay-injecting [`netsim::MessageBus`], and each runs the event-triggered
//! Kalman filter of [`estimator`]. [`scenario::run_scenario`] ties the pieces
//! into a reproducible experiment whose per-tick record is a [`trace::TraceLog`].

pub mod consensus;
pub mod estimator;
pub mod expm;
pub mod graph;
pub mod netsim;
pub mod scenario;
pub mod sod;
pub mod trace;

pub use estimator::{EtkfModel, EtkfState};
pub use graph::{AgentId, CommGraph, Edge};
pub use scenario::{paper_scenario, run_scenario, ScenarioConfig};
pub use trace::{compute_metrics, measurement_error_series, Metrics, TraceLog};
