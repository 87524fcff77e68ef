//! Experiment description and the tick-driven multi-agent runner.
//!
//! Every agent is a first-order integrator `dx_i/dt = u_i`. It broadcasts two
//! send-on-delta channels (its local state and its running average estimate)
//! over the [`MessageBus`], integrates the consensus protocol at every tick
//! from the values it holds, and once per estimation period runs its
//! event-triggered Kalman filter.
//!
//! Control and consensus both use broadcast values on both sides of each
//! difference. An agent adopts its own broadcast value the moment it sends it,
//! while its listeners see it only after the bus delay, so a delay leaves
//! neighbours acting on mismatched views for the length of the delay.
//!
//! Between filter updates the estimate is propagated tick by tick through the
//! filter model, driven by the agent's own control input and the neighbour
//! averages it holds. The first sample is taken as the initial posterior and
//! the first correction happens one period later.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::consensus::{local_rate, stable_step_bound};
use crate::estimator::{
    consensus_realization, measurement_update, project_ahead, EstimatorError, EtkfModel, EtkfState,
    Posterior, RealizationParams,
};
use crate::expm::{discretize_input, matrix_exponential};
use crate::graph::{AgentId, CommGraph, Edge, GraphError};
use crate::netsim::{BusError, MessageBus, TIME_EPS};
use crate::sod::{Channel, ChannelKind, SodError, SodGate};
use crate::trace::{RunMeta, TraceLog, TraceRow};

/// Prior variance of every agent's average estimate.
pub const INITIAL_COVARIANCE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("graph has {graph} agents but {states} initial states were given")]
    AgentCount { graph: usize, states: usize },
    #[error("graph has no directed spanning tree")]
    Disconnected,
    #[error("agent {0} has no neighbours")]
    Isolated(AgentId),
    #[error("{name} = {value} is invalid: {reason}")]
    Invalid {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("tick {tick} s does not divide period {period} s")]
    TickPeriod { tick: f64, period: f64 },
    #[error("tick {tick} s exceeds the consensus step bound {bound} s")]
    TickStability { tick: f64, bound: f64 },
    #[error("link delay {from} -> {to}: {reason}")]
    LinkDelay {
        from: AgentId,
        to: AgentId,
        reason: String,
    },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("agent {agent} at t = {t} s: {source}")]
    Estimator {
        agent: AgentId,
        t: f64,
        source: EstimatorError,
    },
    #[error("agent {agent} at t = {t} s: {source}")]
    Sod {
        agent: AgentId,
        t: f64,
        source: SodError,
    },
    #[error("bus at t = {t} s: {source}")]
    Bus { t: f64, source: BusError },
}

/// Graph section of a scenario file. Edges are `[from, to, weight]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub n: usize,
    pub edges: Vec<(AgentId, AgentId, f64)>,
    #[serde(default)]
    pub undirected: bool,
}

impl GraphSpec {
    pub fn ring(n: usize) -> Self {
        Self {
            n,
            edges: (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect(),
            undirected: true,
        }
    }

    pub fn build(&self) -> Result<CommGraph, GraphError> {
        let edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|&(f, t, w)| Edge::new(f, t, w))
            .collect();
        if self.undirected {
            CommGraph::undirected(self.n, &edges)
        } else {
            CommGraph::new(self.n, &edges)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub graph: GraphSpec,
    /// Volts.
    pub initial_states: Vec<f64>,
    pub delta_voltage: f64,
    pub delta_energy: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub period_s: f64,
    pub tick_s: f64,
    pub duration_s: f64,
    pub delay_ms: f64,
    pub drop_probability: f64,
    pub seed: u64,
    pub measurement_noise_std: f64,
    /// Per-link overrides as `[from, to, delay_ms]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub link_delays_ms: Vec<(AgentId, AgentId, f64)>,
}

/// The 5-agent experiment, with or without the 150 ms transmission delay.
pub fn paper_scenario(delayed: bool) -> ScenarioConfig {
    ScenarioConfig {
        graph: GraphSpec::ring(5),
        initial_states: vec![52.0, 44.0, 47.0, 48.0, 49.0],
        delta_voltage: 0.1,
        delta_energy: 0.01,
        q: 0.0,
        r: 1.0,
        period_s: 1.0,
        tick_s: 0.01,
        duration_s: 30.0,
        delay_ms: if delayed { 150.0 } else { 0.0 },
        drop_probability: 0.0,
        seed: 42,
        measurement_noise_std: 0.0,
        link_delays_ms: Vec::new(),
    }
}

fn require(
    name: &'static str,
    value: f64,
    ok: bool,
    reason: &'static str,
) -> Result<(), ConfigError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            name,
            value,
            reason,
        })
    }
}

impl ScenarioConfig {
    pub fn n(&self) -> usize {
        self.initial_states.len()
    }

    pub fn delta(&self, kind: ChannelKind) -> f64 {
        match kind {
            ChannelKind::Voltage => self.delta_voltage,
            ChannelKind::Energy => self.delta_energy,
        }
    }

    pub fn mean_initial_state(&self) -> f64 {
        self.initial_states.iter().sum::<f64>() / self.n() as f64
    }

    pub fn ticks_per_period(&self) -> usize {
        (self.period_s / self.tick_s).round() as usize
    }

    pub fn total_ticks(&self) -> usize {
        (self.duration_s / self.tick_s + TIME_EPS).floor() as usize
    }

    /// Simulation time of tick `k`, exact in decimal when `1/tick` is integral.
    pub fn tick_time(&self, k: usize) -> f64 {
        let per_second = (1.0 / self.tick_s).round();
        if per_second > 0.0 && (per_second * self.tick_s - 1.0).abs() < TIME_EPS {
            k as f64 / per_second
        } else {
            k as f64 * self.tick_s
        }
    }

    /// Checks every invariant and returns the communication graph.
    pub fn validate(&self) -> Result<CommGraph, ConfigError> {
        let g = self.graph.build()?;
        if g.n() != self.n() {
            return Err(ConfigError::AgentCount {
                graph: g.n(),
                states: self.n(),
            });
        }
        for &x in &self.initial_states {
            require("initial_states", x, true, "must be finite")?;
        }
        require(
            "delta_voltage",
            self.delta_voltage,
            self.delta_voltage >= 0.0,
            "must be non-negative",
        )?;
        require(
            "delta_energy",
            self.delta_energy,
            self.delta_energy >= 0.0,
            "must be non-negative",
        )?;
        require("Q", self.q, self.q >= 0.0, "must be non-negative")?;
        require("R", self.r, self.r > 0.0, "must be positive")?;
        require(
            "period_s",
            self.period_s,
            self.period_s > 0.0,
            "must be positive",
        )?;
        require("tick_s", self.tick_s, self.tick_s > 0.0, "must be positive")?;
        require(
            "tick_s",
            self.tick_s,
            self.tick_s <= self.period_s,
            "must not exceed the period",
        )?;
        require(
            "duration_s",
            self.duration_s,
            self.duration_s > 0.0,
            "must be positive",
        )?;
        require(
            "duration_s",
            self.duration_s,
            self.duration_s >= self.tick_s,
            "must span at least one tick",
        )?;
        require(
            "delay_ms",
            self.delay_ms,
            self.delay_ms >= 0.0,
            "must be non-negative",
        )?;
        require(
            "drop_probability",
            self.drop_probability,
            (0.0..=1.0).contains(&self.drop_probability),
            "must lie in [0, 1]",
        )?;
        require(
            "measurement_noise_std",
            self.measurement_noise_std,
            self.measurement_noise_std >= 0.0,
            "must be non-negative",
        )?;
        let ticks = self.period_s / self.tick_s;
        if (ticks - ticks.round()).abs() > 1e-9 {
            return Err(ConfigError::TickPeriod {
                tick: self.tick_s,
                period: self.period_s,
            });
        }
        let bound = stable_step_bound(&g.laplacian());
        if self.tick_s >= bound {
            return Err(ConfigError::TickStability {
                tick: self.tick_s,
                bound,
            });
        }
        if !g.is_connected() {
            return Err(ConfigError::Disconnected);
        }
        if let Some(i) = (0..g.n()).find(|&i| g.in_degree(i) == 0.0) {
            return Err(ConfigError::Isolated(i));
        }
        for &(from, to, ms) in &self.link_delays_ms {
            if from >= g.n() || to >= g.n() {
                return Err(ConfigError::LinkDelay {
                    from,
                    to,
                    reason: "agent out of range".into(),
                });
            }
            if !(ms >= 0.0) || !ms.is_finite() {
                return Err(ConfigError::LinkDelay {
                    from,
                    to,
                    reason: format!("delay {ms} ms must be finite and non-negative"),
                });
            }
        }
        Ok(g)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&compact)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// What one agent knows and runs.
struct Agent {
    x: f64,
    xbar: f64,
    gates: [SodGate; 2],
    /// Latest value per sender, per channel. The own entry is the agent's
    /// last broadcast, adopted as soon as it is sent.
    held: [Vec<Option<f64>>; 2],
    /// Agent's state as its listeners currently hold it.
    network_view: Option<f64>,
    neighbors: Vec<AgentId>,
    listeners: Vec<AgentId>,
    /// Neighbour averages delivered since the previous filter update.
    fresh: Vec<Option<f64>>,
    model: EtkfModel,
    filter: EtkfState,
    /// One-tick transition and input gain of the filter model.
    tick_phi: f64,
    tick_gamma: f64,
    /// Current estimate: the posterior at update instants, its model
    /// prediction in between.
    xhat: f64,
}

impl Agent {
    fn held(&self, channel: Channel, who: AgentId) -> Option<f64> {
        self.held[channel.index()][who]
    }

    /// `(a_ij, value)` for every neighbour heard from on `channel`.
    fn heard<'a>(
        &'a self,
        g: &'a CommGraph,
        me: AgentId,
        channel: Channel,
    ) -> impl Iterator<Item = (f64, f64)> + 'a {
        self.neighbors
            .iter()
            .filter_map(move |&j| self.held(channel, j).map(|v| (g.weight(me, j), v)))
    }
}

/// Runs `config` to completion. Per tick, in order: integrate the agents and
/// their consensus states from held values, offer samples to the gates and
/// publish, deliver due messages, and on period boundaries run each filter.
pub fn run_scenario(config: &ScenarioConfig) -> Result<TraceLog, RunError> {
    let g = config.validate()?;
    let n = g.n();
    let h = config.tick_s;
    let per_period = config.ticks_per_period();
    let total = config.total_ticks();

    let mut bus = MessageBus::new(
        n,
        config.delay_ms / 1000.0,
        config.drop_probability,
        config.seed,
    )
    .map_err(|source| RunError::Bus { t: 0.0, source })?;
    for &(from, to, ms) in &config.link_delays_ms {
        bus.set_link_delay(from, to, ms / 1000.0)
            .map_err(|source| RunError::Bus { t: 0.0, source })?;
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(1);
    let noise = (config.measurement_noise_std > 0.0)
        .then(|| Normal::new(0.0, config.measurement_noise_std).expect("validated std"));
    let mut sense = |x: f64| match &noise {
        Some(d) => x + d.sample(&mut noise_rng),
        None => x,
    };

    let params = RealizationParams {
        q: config.q,
        r: config.r,
        period: config.period_s,
        delta: config.delta(ChannelKind::Voltage),
    };
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let model = consensus_realization(i, &g, params).map_err(|source| RunError::Estimator {
            agent: i,
            t: 0.0,
            source,
        })?;
        let gate = || SodGate::new(config.delta(ChannelKind::Voltage)).expect("validated delta");
        let x0 = config.initial_states[i];
        let tick_phi = matrix_exponential(model.a(), h)[(0, 0)];
        let tick_gamma = discretize_input(model.a(), model.b(), h)[(0, 0)];
        agents.push(Agent {
            x: x0,
            xbar: x0,
            gates: [gate(), gate()],
            held: [vec![None; n], vec![None; n]],
            network_view: None,
            neighbors: g.neighbors(i),
            listeners: g.listeners(i),
            fresh: vec![None; n],
            // replaced by the first sample at tick 0
            filter: EtkfState::new(&model, DVector::zeros(1), DMatrix::zeros(1, 1))
                .expect("scalar state"),
            model,
            tick_phi,
            tick_gamma,
            xhat: x0,
        });
    }

    let mut rows = Vec::with_capacity(total * n);
    let mut events = vec![false; n];
    let mut sent = [0u64; 2];

    for k in 0..total {
        let t = config.tick_time(k);

        if k > 0 {
            let rates: Vec<(f64, f64, f64)> = agents
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let own_x = a.held(Channel::State, i).unwrap_or(a.x);
                    let u = local_rate(0.0, own_x, a.heard(&g, i, Channel::State));
                    let own_bar = a.held(Channel::Average, i).unwrap_or(a.xbar);
                    let xbar_rate = local_rate(u, own_bar, a.heard(&g, i, Channel::Average));
                    // Known filter input: own control plus every neighbour
                    // average, standing in for itself where nothing arrived yet.
                    let drive = u + a
                        .neighbors
                        .iter()
                        .map(|&j| g.weight(i, j) * a.held(Channel::Average, j).unwrap_or(a.xhat))
                        .sum::<f64>();
                    (u, xbar_rate, drive)
                })
                .collect();
            for (a, (u, xbar_rate, drive)) in agents.iter_mut().zip(rates) {
                a.x += h * u;
                a.xbar += h * xbar_rate;
                a.xhat = a.tick_phi * a.xhat + a.tick_gamma * drive;
            }
        }

        let measured: Vec<f64> = agents.iter().map(|a| sense(a.x)).collect();
        for (i, a) in agents.iter_mut().enumerate() {
            events[i] = false;
            for channel in Channel::ALL {
                let value = match channel {
                    Channel::State => measured[i],
                    Channel::Average => a.xbar,
                };
                let msg = a.gates[channel.index()]
                    .evaluate(value, t, i, channel)
                    .map_err(|source| RunError::Sod {
                        agent: i,
                        t,
                        source,
                    })?;
                if let Some(msg) = msg {
                    sent[channel.index()] += 1;
                    events[i] |= channel == Channel::State;
                    a.held[channel.index()][i] = Some(msg.value);
                    bus.publish(msg, &a.listeners, t)
                        .map_err(|source| RunError::Bus { t, source })?;
                }
            }
        }

        for (to, msgs) in bus.deliver_due(t) {
            for m in msgs {
                if m.channel == Channel::State {
                    agents[m.sender].network_view = Some(m.value);
                }
                let a = &mut agents[to];
                a.held[m.channel.index()][m.sender] = Some(m.value);
                if m.channel == Channel::Average {
                    a.fresh[m.sender] = Some(m.value);
                }
            }
        }

        if k % per_period == 0 {
            for (i, a) in agents.iter_mut().enumerate() {
                if k == 0 {
                    // The first sample is the initial posterior; the first
                    // correction happens one period later.
                    let x0 = DVector::from_element(1, measured[i]);
                    let p0 = DMatrix::from_element(1, 1, INITIAL_COVARIANCE);
                    let init =
                        EtkfState::new(&a.model, x0.clone(), p0.clone()).map_err(|source| {
                            RunError::Estimator {
                                agent: i,
                                t,
                                source,
                            }
                        })?;
                    let post = Posterior {
                        x: x0,
                        p: p0,
                        gain: DMatrix::zeros(1, a.model.output_dim()),
                    };
                    a.filter = project_ahead(&init, &a.model, &post, &DVector::zeros(1)).map_err(
                        |source| RunError::Estimator {
                            agent: i,
                            t,
                            source,
                        },
                    )?;
                    a.xhat = measured[i];
                    continue;
                }
                // prior mean carried through the period at tick resolution
                a.filter.x_pred[0] = a.xhat;
                let mut received = Vec::with_capacity(1 + a.neighbors.len());
                received.push(Some(measured[i]));
                received.extend(a.neighbors.iter().map(|&j| a.fresh[j].take()));
                let (post, updated) =
                    measurement_update(&a.filter, &a.model, &received).map_err(|source| {
                        RunError::Estimator {
                            agent: i,
                            t,
                            source,
                        }
                    })?;
                let drive: f64 = a
                    .neighbors
                    .iter()
                    .enumerate()
                    .map(|(c, &j)| g.weight(i, j) * updated.y_last[c + 1])
                    .sum();
                a.filter =
                    project_ahead(&updated, &a.model, &post, &DVector::from_element(1, drive))
                        .map_err(|source| RunError::Estimator {
                            agent: i,
                            t,
                            source,
                        })?;
                a.xhat = post.x[0];
            }
        }

        for (i, a) in agents.iter().enumerate() {
            let reference = a
                .network_view
                .or(a.gates[Channel::State.index()].last_sent())
                .unwrap_or(a.x);
            rows.push(TraceRow {
                t,
                agent: i,
                x_true: a.x,
                xbar: a.xbar,
                xhat: a.xhat,
                e_meas: reference - a.x,
                event: u8::from(events[i]),
            });
        }
    }

    Ok(TraceLog {
        rows,
        meta: Some(RunMeta {
            config_hash: config.hash(),
            seed: config.seed,
            agents: n,
            ticks: total,
            state_messages: sent[Channel::State.index()],
            average_messages: sent[Channel::Average.index()],
            bus: bus.counters(),
        }),
    })
}
