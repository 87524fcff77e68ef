//! Per-tick run records, their CSV form, and the metrics derived from them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::AgentId;
use crate::netsim::BusCounters;

/// Column order of the trace CSV.
pub const CSV_HEADER: &str = "t,agent,x_true,xbar,xhat,e_meas,event";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("agent {0} does not appear in the trace")]
    UnknownAgent(AgentId),
    #[error("band must be positive, got {0}")]
    BadBand(f64),
    #[error("unexpected CSV header {0:?}")]
    Header(String),
    #[error("agent {agent}: row at t = {t} is not after t = {prev}")]
    Unordered { agent: AgentId, t: f64, prev: f64 },
    #[error("event flag {0} is not 0 or 1")]
    EventFlag(u8),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub agent: AgentId,
    pub x_true: f64,
    pub xbar: f64,
    pub xhat: f64,
    /// Last broadcast state minus the current true state.
    pub e_meas: f64,
    pub event: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub agents: usize,
    pub ticks: usize,
    pub state_messages: u64,
    pub average_messages: u64,
    pub bus: BusCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLog {
    pub rows: Vec<TraceRow>,
    /// Absent for traces loaded from CSV.
    pub meta: Option<RunMeta>,
}

impl TraceLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TraceError> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER.split(','))?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, TraceError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
        if header != CSV_HEADER {
            return Err(TraceError::Header(header));
        }
        let rows = r.deserialize().collect::<Result<Vec<TraceRow>, _>>()?;
        let log = Self { rows, meta: None };
        log.check()?;
        Ok(log)
    }

    fn check(&self) -> Result<(), TraceError> {
        let mut last: BTreeMap<AgentId, f64> = BTreeMap::new();
        for row in &self.rows {
            if row.event > 1 {
                return Err(TraceError::EventFlag(row.event));
            }
            if let Some(&prev) = last.get(&row.agent) {
                if row.t <= prev {
                    return Err(TraceError::Unordered {
                        agent: row.agent,
                        t: row.t,
                        prev,
                    });
                }
            }
            last.insert(row.agent, row.t);
        }
        Ok(())
    }

    /// Agent ids in ascending order.
    pub fn agents(&self) -> Vec<AgentId> {
        let mut ids: Vec<AgentId> = self.rows.iter().map(|r| r.agent).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn agent_rows(&self, agent: AgentId) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.agent == agent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean of the agents' states at the first recorded instant.
    pub target: f64,
    pub band: f64,
    /// `None` when the estimate is outside the band at the end of the run.
    pub settling_time: Vec<Option<f64>>,
    pub total_events: u64,
    pub events_per_agent: Vec<u64>,
    /// One state message per agent per tick.
    pub periodic_equivalent_messages: u64,
    pub reduction_ratio: f64,
    pub final_error: Vec<f64>,
}

pub fn compute_metrics(trace: &TraceLog, band: f64) -> Result<Metrics, TraceError> {
    if !(band > 0.0) {
        return Err(TraceError::BadBand(band));
    }
    let agents = trace.agents();
    if agents.is_empty() {
        return Err(TraceError::Empty);
    }
    let initial: Vec<f64> = agents
        .iter()
        .map(|&a| trace.agent_rows(a).next().expect("agent has rows").x_true)
        .collect();
    let target = initial.iter().sum::<f64>() / initial.len() as f64;

    let mut settling_time = Vec::with_capacity(agents.len());
    let mut events_per_agent = Vec::with_capacity(agents.len());
    let mut final_error = Vec::with_capacity(agents.len());
    for &a in &agents {
        let mut settled_since: Option<f64> = None;
        let mut events = 0u64;
        let mut last = 0.0;
        for row in trace.agent_rows(a) {
            let inside = (row.xhat - target).abs() <= band;
            settled_since = match (inside, settled_since) {
                (true, None) => Some(row.t),
                (true, s) => s,
                (false, _) => None,
            };
            events += u64::from(row.event);
            last = row.xhat;
        }
        settling_time.push(settled_since);
        events_per_agent.push(events);
        final_error.push((last - target).abs());
    }
    let total_events: u64 = events_per_agent.iter().sum();
    let periodic = trace.rows.len() as u64;
    Ok(Metrics {
        target,
        band,
        settling_time,
        total_events,
        events_per_agent,
        periodic_equivalent_messages: periodic,
        reduction_ratio: 1.0 - total_events as f64 / periodic as f64,
        final_error,
    })
}

/// `(t, e_i(t))` for one agent.
pub fn measurement_error_series(
    trace: &TraceLog,
    agent: AgentId,
) -> Result<Vec<(f64, f64)>, TraceError> {
    let series: Vec<(f64, f64)> = trace.agent_rows(agent).map(|r| (r.t, r.e_meas)).collect();
    if series.is_empty() {
        return Err(TraceError::UnknownAgent(agent));
    }
    Ok(series)
}
