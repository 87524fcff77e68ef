//! Send-on-delta transmission gates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::AgentId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SodError {
    #[error("threshold must be finite and non-negative, got {0}")]
    BadDelta(f64),
    #[error("non-finite sample {0}")]
    NonFinite(f64),
    #[error("sample time {t} precedes last transmission at {last}")]
    TimeReversal { t: f64, last: f64 },
    #[error("gate has not transmitted yet")]
    Uninitialized,
}

/// Which physical quantity a channel carries; selects its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Volts.
    Voltage,
    /// Per-unit energy.
    Energy,
}

/// Identifies one broadcast stream of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    /// The agent's local state.
    State,
    /// The agent's running estimate of the network average.
    Average,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::State, Channel::Average];

    pub fn index(self) -> usize {
        match self {
            Channel::State => 0,
            Channel::Average => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMessage {
    pub sender: AgentId,
    pub channel: Channel,
    pub value: f64,
    pub sent_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SodGate {
    delta: f64,
    last_sent: Option<f64>,
    last_sent_time: f64,
}

impl SodGate {
    pub fn new(delta: f64) -> Result<Self, SodError> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(SodError::BadDelta(delta));
        }
        Ok(Self {
            delta,
            last_sent: None,
            last_sent_time: 0.0,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn last_sent(&self) -> Option<f64> {
        self.last_sent
    }

    pub fn last_sent_time(&self) -> f64 {
        self.last_sent_time
    }

    /// Offers sample `y` taken at `t`. Transmits when the gate has never sent,
    /// or when `|y - last_sent|` strictly exceeds the threshold.
    pub fn evaluate(
        &mut self,
        y: f64,
        t: f64,
        sender: AgentId,
        channel: Channel,
    ) -> Result<Option<EventMessage>, SodError> {
        if !y.is_finite() {
            return Err(SodError::NonFinite(y));
        }
        if self.last_sent.is_some() && t < self.last_sent_time {
            return Err(SodError::TimeReversal {
                t,
                last: self.last_sent_time,
            });
        }
        let fire = match self.last_sent {
            None => true,
            Some(last) => (y - last).abs() > self.delta,
        };
        if !fire {
            return Ok(None);
        }
        self.last_sent = Some(y);
        self.last_sent_time = t;
        Ok(Some(EventMessage {
            sender,
            channel,
            value: y,
            sent_at: t,
        }))
    }

    /// Interval guaranteed to contain the current, untransmitted value.
    pub fn held_value_bounds(&self) -> Result<(f64, f64), SodError> {
        let last = self.last_sent.ok_or(SodError::Uninitialized)?;
        Ok((last - self.delta, last + self.delta))
    }
}
