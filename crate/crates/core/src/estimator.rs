//! Event-triggered Kalman filter for send-on-delta measurement channels.
//!
//! A channel that delivered nothing since the previous period keeps its last
//! received value in the innovation, and its noise variance is inflated by
//! `delta^2 / 3`: the variance of a perturbation uniformly distributed on
//! `[-delta, delta]`, which is all the receiver knows about the drift since
//! the last transmission.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expm::{discretize_input, discretize_process_noise, matrix_exponential};
use crate::graph::{AgentId, CommGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("period must be positive and finite, got {0}")]
    BadPeriod(f64),
    #[error("channel {channel} threshold must be finite and non-negative, got {delta}")]
    BadDelta { channel: usize, delta: f64 },
    #[error("{0} is not symmetric")]
    NotSymmetric(&'static str),
    #[error("measurement variance of channel {0} must be positive")]
    NonPositiveVariance(usize),
    #[error("innovation covariance is singular at step {0}")]
    SingularInnovation(u64),
    #[error("agent {0} has no neighbours")]
    IsolatedAgent(AgentId),
    #[error("agent {agent} is outside 0..{n}")]
    UnknownAgent { agent: AgentId, n: usize },
}

fn expect_dim(what: &'static str, expected: usize, got: usize) -> Result<(), EstimatorError> {
    if expected == got {
        Ok(())
    } else {
        Err(EstimatorError::Dimension {
            what,
            expected,
            got,
        })
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

/// Filter parameters plus the per-period discretization derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EtkfModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    period: f64,
    deltas: DVector<f64>,
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    q_d: DMatrix<f64>,
}

impl EtkfModel {
    /// Model without exogenous input.
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        period: f64,
        deltas: DVector<f64>,
    ) -> Result<Self, EstimatorError> {
        let n = a.nrows();
        Self::with_input(a, DMatrix::zeros(n, 0), c, q, r, period, deltas)
    }

    /// Model with a known input `u` entering as `dx/dt = A x + B u + w`,
    /// held constant over each period.
    pub fn with_input(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        period: f64,
        deltas: DVector<f64>,
    ) -> Result<Self, EstimatorError> {
        let n = a.nrows();
        let p = c.nrows();
        expect_dim("A columns", n, a.ncols())?;
        expect_dim("B rows", n, b.nrows())?;
        expect_dim("C columns", n, c.ncols())?;
        expect_dim("Q rows", n, q.nrows())?;
        expect_dim("Q columns", n, q.ncols())?;
        expect_dim("R rows", p, r.nrows())?;
        expect_dim("R columns", p, r.ncols())?;
        expect_dim("deltas", p, deltas.len())?;
        if !(period > 0.0) || !period.is_finite() {
            return Err(EstimatorError::BadPeriod(period));
        }
        for (channel, &delta) in deltas.iter().enumerate() {
            if !(delta >= 0.0) || !delta.is_finite() {
                return Err(EstimatorError::BadDelta { channel, delta });
            }
        }
        if !is_symmetric(&q) {
            return Err(EstimatorError::NotSymmetric("Q"));
        }
        if !is_symmetric(&r) {
            return Err(EstimatorError::NotSymmetric("R"));
        }
        if let Some(i) = (0..p).find(|&i| !(r[(i, i)] > 0.0)) {
            return Err(EstimatorError::NonPositiveVariance(i));
        }
        let phi = matrix_exponential(&a, period);
        let gamma = discretize_input(&a, &b, period);
        let q_d = discretize_process_noise(&a, &q, period);
        Ok(Self {
            a,
            b,
            c,
            q,
            r,
            period,
            deltas,
            phi,
            gamma,
            q_d,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn deltas(&self) -> &DVector<f64> {
        &self.deltas
    }

    /// `exp(A T)`.
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn input_gain(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn discrete_process_noise(&self) -> &DMatrix<f64> {
        &self.q_d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtkfState {
    /// Prior state estimate for the current period.
    pub x_pred: DVector<f64>,
    /// Prior covariance.
    pub p_pred: DMatrix<f64>,
    /// Last received value per channel.
    pub y_last: DVector<f64>,
    pub k: u64,
}

impl EtkfState {
    /// Initial prior; `y_last` starts at `C x_pred`.
    pub fn new(
        model: &EtkfModel,
        x0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self, EstimatorError> {
        let n = model.state_dim();
        expect_dim("initial state", n, x0.len())?;
        expect_dim("initial covariance rows", n, p0.nrows())?;
        expect_dim("initial covariance columns", n, p0.ncols())?;
        if !is_symmetric(&p0) {
            return Err(EstimatorError::NotSymmetric("P0"));
        }
        Ok(Self {
            y_last: &model.c * &x0,
            x_pred: x0,
            p_pred: p0,
            k: 0,
        })
    }
}

/// Posterior `x(kT)`, `P_k` and the gain that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// `R` with `delta_i^2 / 3` added to the diagonal of every channel that was
/// not received this period.
pub fn inflate_measurement_covariance(
    r: &DMatrix<f64>,
    received: &[bool],
    deltas: &DVector<f64>,
) -> DMatrix<f64> {
    let mut r_bar = r.clone();
    for (i, (&got, &delta)) in received.iter().zip(deltas.iter()).enumerate() {
        if !got {
            r_bar[(i, i)] += delta * delta / 3.0;
        }
    }
    r_bar
}

/// Measurement update. `received[i]` is `Some(y)` when channel `i` delivered
/// `y` during this period; silent channels reuse their held value.
pub fn measurement_update(
    state: &EtkfState,
    model: &EtkfModel,
    received: &[Option<f64>],
) -> Result<(Posterior, EtkfState), EstimatorError> {
    let n = model.state_dim();
    let p = model.output_dim();
    expect_dim("received channels", p, received.len())?;
    expect_dim("y_last", p, state.y_last.len())?;
    expect_dim("prior state", n, state.x_pred.len())?;

    let mut y_last = state.y_last.clone();
    for (slot, value) in y_last.iter_mut().zip(received) {
        if let Some(v) = value {
            *slot = *v;
        }
    }
    let mask: Vec<bool> = received.iter().map(Option::is_some).collect();
    let r_bar = inflate_measurement_covariance(&model.r, &mask, &model.deltas);

    let c = &model.c;
    let pct = &state.p_pred * c.transpose();
    let innovation_cov = c * &pct + r_bar;
    let s_inv = innovation_cov
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or(EstimatorError::SingularInnovation(state.k))?;
    let gain = pct * s_inv;
    let x = &state.x_pred + &gain * (&y_last - c * &state.x_pred);
    let p_post = (DMatrix::identity(n, n) - &gain * c) * &state.p_pred;
    let p_post = (&p_post + p_post.transpose()) * 0.5;

    let next = EtkfState {
        x_pred: state.x_pred.clone(),
        p_pred: state.p_pred.clone(),
        y_last,
        k: state.k,
    };
    Ok((Posterior { x, p: p_post, gain }, next))
}

/// Time update to the next period. `input` is held over the period and must
/// match the model's input dimension (pass an empty vector for none).
pub fn project_ahead(
    state: &EtkfState,
    model: &EtkfModel,
    posterior: &Posterior,
    input: &DVector<f64>,
) -> Result<EtkfState, EstimatorError> {
    expect_dim("input", model.input_dim(), input.len())?;
    let phi = &model.phi;
    let x_pred = phi * &posterior.x + &model.gamma * input;
    let p_pred = phi * &posterior.p * phi.transpose() + &model.q_d;
    Ok(EtkfState {
        x_pred,
        p_pred,
        y_last: state.y_last.clone(),
        k: state.k + 1,
    })
}

/// Noise and timing parameters shared by every agent's filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizationParams {
    /// Process noise intensity of the scalar average state.
    pub q: f64,
    /// Measurement noise variance of every channel.
    pub r: f64,
    pub period: f64,
    pub delta: f64,
}

/// Scalar filter for agent `i`'s network-average estimate `xbar_i`.
///
/// `A = [-d_i]` and a unit input carries `dx_i/dt + sum_j a_ij xbar_j`, so the
/// model is exactly the local consensus law. Channel 0 is the agent's own
/// local state; channels `1..` are the neighbours' broadcast averages in
/// ascending agent order.
pub fn consensus_realization(
    agent: AgentId,
    g: &CommGraph,
    params: RealizationParams,
) -> Result<EtkfModel, EstimatorError> {
    if agent >= g.n() {
        return Err(EstimatorError::UnknownAgent { agent, n: g.n() });
    }
    let d = g.in_degree(agent);
    if d == 0.0 {
        return Err(EstimatorError::IsolatedAgent(agent));
    }
    let p = 1 + g.neighbors(agent).len();
    EtkfModel::with_input(
        DMatrix::from_element(1, 1, -d),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(p, 1, 1.0),
        DMatrix::from_element(1, 1, params.q),
        DMatrix::identity(p, p) * params.r,
        params.period,
        DVector::from_element(p, params.delta),
    )
}
