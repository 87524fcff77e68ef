//! Deterministic delay-injecting message bus.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::AgentId;
use crate::sod::EventMessage;

/// Slack when comparing simulation instants, far below any tick size.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BusError {
    #[error("recipient {recipient} is outside 0..{n}")]
    UnknownRecipient { recipient: AgentId, n: usize },
    #[error("publish time {now} precedes an earlier publish at {last}")]
    TimeReversal { now: f64, last: f64 },
    #[error("invalid bus parameter: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
struct InFlight {
    deliver_at: f64,
    seq: u64,
    to: AgentId,
    msg: EventMessage,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for InFlight {}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> Ordering {
        self.deliver_at
            .total_cmp(&other.deliver_at)
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BusCounters {
    /// One per (message, recipient) pair handed to `publish`.
    pub published: u64,
    pub delivered: u64,
    pub dropped: u64,
}

impl BusCounters {
    pub fn in_flight(&self) -> u64 {
        self.published - self.delivered - self.dropped
    }
}

#[derive(Debug, Clone)]
pub struct MessageBus {
    n: usize,
    in_flight: BinaryHeap<Reverse<InFlight>>,
    default_delay: f64,
    link_delay: HashMap<(AgentId, AgentId), f64>,
    drop_probability: f64,
    rng: ChaCha8Rng,
    seq: u64,
    last_publish: f64,
    counters: BusCounters,
}

impl MessageBus {
    /// Bus between `n` agents. `default_delay` is in seconds.
    pub fn new(
        n: usize,
        default_delay: f64,
        drop_probability: f64,
        seed: u64,
    ) -> Result<Self, BusError> {
        check_delay(default_delay)?;
        if !(0.0..=1.0).contains(&drop_probability) {
            return Err(BusError::Config(format!(
                "drop probability {drop_probability} outside [0, 1]"
            )));
        }
        Ok(Self {
            n,
            in_flight: BinaryHeap::new(),
            default_delay,
            link_delay: HashMap::new(),
            drop_probability,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seq: 0,
            last_publish: f64::NEG_INFINITY,
            counters: BusCounters::default(),
        })
    }

    /// Overrides the delay of the `from -> to` link.
    pub fn set_link_delay(
        &mut self,
        from: AgentId,
        to: AgentId,
        delay: f64,
    ) -> Result<(), BusError> {
        check_delay(delay)?;
        for a in [from, to] {
            if a >= self.n {
                return Err(BusError::UnknownRecipient {
                    recipient: a,
                    n: self.n,
                });
            }
        }
        self.link_delay.insert((from, to), delay);
        Ok(())
    }

    pub fn default_delay(&self) -> f64 {
        self.default_delay
    }

    pub fn counters(&self) -> BusCounters {
        self.counters
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }

    /// Queues `msg` for every recipient, each subject to its own drop draw.
    pub fn publish(
        &mut self,
        msg: EventMessage,
        recipients: &[AgentId],
        now: f64,
    ) -> Result<(), BusError> {
        if now < self.last_publish - TIME_EPS {
            return Err(BusError::TimeReversal {
                now,
                last: self.last_publish,
            });
        }
        if let Some(&bad) = recipients.iter().find(|&&r| r >= self.n) {
            return Err(BusError::UnknownRecipient {
                recipient: bad,
                n: self.n,
            });
        }
        self.last_publish = self.last_publish.max(now);
        for &to in recipients {
            self.counters.published += 1;
            if self.drop_probability > 0.0 && self.rng.random_bool(self.drop_probability) {
                self.counters.dropped += 1;
                continue;
            }
            let delay = self
                .link_delay
                .get(&(msg.sender, to))
                .copied()
                .unwrap_or(self.default_delay);
            self.in_flight.push(Reverse(InFlight {
                deliver_at: now + delay,
                seq: self.seq,
                to,
                msg,
            }));
            self.seq += 1;
        }
        Ok(())
    }

    /// Removes every message due by `now`, grouped by recipient, each group in
    /// delivery-time then publication order.
    pub fn deliver_due(&mut self, now: f64) -> BTreeMap<AgentId, Vec<EventMessage>> {
        let mut out: BTreeMap<AgentId, Vec<EventMessage>> = BTreeMap::new();
        while let Some(Reverse(head)) = self.in_flight.peek() {
            if head.deliver_at > now + TIME_EPS {
                break;
            }
            let Reverse(item) = self.in_flight.pop().expect("peeked");
            self.counters.delivered += 1;
            out.entry(item.to).or_default().push(item.msg);
        }
        out
    }
}

fn check_delay(delay: f64) -> Result<(), BusError> {
    if delay >= 0.0 && delay.is_finite() {
        Ok(())
    } else {
        Err(BusError::Config(format!(
            "delay {delay} s must be finite and non-negative"
        )))
    }
}
