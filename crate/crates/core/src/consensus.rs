//! Dynamic average consensus: every agent tracks the network-wide mean of the
//! local states using only neighbour information.
//!
//! The global form integrated here is `d(xbar)/dt = dx/dt - L xbar`. Its
//! steady-state gain `lim_{s->0} s (sI + L)^-1` is the averaging matrix with
//! every entry `1/n` for balanced graphs that contain a spanning tree.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsensusError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("step {h} s is outside the stability bound (0, {bound}) s")]
    UnstableStep { h: f64, bound: f64 },
    #[error("averaging matrix needs at least one agent")]
    NoAgents,
    #[error("frequency s must be positive, got {0}")]
    NonPositiveFrequency(f64),
    #[error("(sI + L) is singular at s = {0}")]
    Singular(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    /// Local states `x_i`.
    pub x: DVector<f64>,
    /// Local estimates of the network average.
    pub xbar: DVector<f64>,
    pub t: f64,
}

impl ConsensusState {
    /// Starts with every average estimate equal to its local state.
    pub fn new(x: DVector<f64>) -> Self {
        Self {
            xbar: x.clone(),
            x,
            t: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }
}

/// Largest explicit-Euler step accepted for Laplacian `l`: `1 / max_i d_i`.
/// Infinite for a graph without arcs.
pub fn stable_step_bound(l: &DMatrix<f64>) -> f64 {
    let max_deg = l.diagonal().iter().copied().fold(0.0_f64, f64::max);
    if max_deg > 0.0 {
        1.0 / max_deg
    } else {
        f64::INFINITY
    }
}

/// One explicit-Euler step of the global consensus dynamics.
pub fn consensus_step(
    state: &ConsensusState,
    xdot: &DVector<f64>,
    l: &DMatrix<f64>,
    h: f64,
) -> Result<ConsensusState, ConsensusError> {
    let n = state.n();
    check_dim("xbar", n, state.xbar.len())?;
    check_dim("xdot", n, xdot.len())?;
    check_dim("laplacian rows", n, l.nrows())?;
    check_dim("laplacian cols", n, l.ncols())?;
    let bound = stable_step_bound(l);
    if !(h > 0.0 && h < bound) {
        return Err(ConsensusError::UnstableStep { h, bound });
    }
    let rate = xdot - l * &state.xbar;
    Ok(ConsensusState {
        x: &state.x + xdot * h,
        xbar: &state.xbar + rate * h,
        t: state.t + h,
    })
}

/// Rate of agent `i`'s average estimate under the local protocol, given the
/// values it currently holds for itself and its neighbours.
pub fn local_rate(xdot_i: f64, own: f64, neighbors: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    xdot_i
        + neighbors
            .into_iter()
            .map(|(weight, value)| weight * (value - own))
            .sum::<f64>()
}

/// The `n x n` matrix with every entry `1/n`.
pub fn averaging_matrix(n: usize) -> Result<DMatrix<f64>, ConsensusError> {
    if n == 0 {
        return Err(ConsensusError::NoAgents);
    }
    Ok(DMatrix::from_element(n, n, 1.0 / n as f64))
}

/// Transfer matrix `s (sI + L)^-1` evaluated at the real frequency `s`.
pub fn steady_state_gain(l: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>, ConsensusError> {
    if !(s > 0.0) {
        return Err(ConsensusError::NonPositiveFrequency(s));
    }
    check_dim("laplacian cols", l.nrows(), l.ncols())?;
    let n = l.nrows();
    let shifted = DMatrix::identity(n, n) * s + l;
    let inv = shifted
        .lu()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(ConsensusError::Singular(s))?;
    Ok(inv * s)
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), ConsensusError> {
    if expected == got {
        Ok(())
    } else {
        Err(ConsensusError::Dimension {
            what,
            expected,
            got,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CommGraph;
    use approx::assert_abs_diff_eq;

    fn pair_laplacian() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.])
    }

    #[test]
    fn uniform_state_is_a_fixed_point() {
        let l = CommGraph::ring(5).unwrap().laplacian();
        let s = ConsensusState::new(DVector::from_element(5, 47.5));
        let next = consensus_step(&s, &DVector::zeros(5), &l, 0.1).unwrap();
        assert_eq!(next.xbar, s.xbar);
        assert_abs_diff_eq!(next.t, 0.1);
    }

    #[test]
    fn pair_step_by_hand() {
        let s = ConsensusState::new(DVector::from_vec(vec![52.0, 44.0]));
        let next = consensus_step(&s, &DVector::zeros(2), &pair_laplacian(), 0.1).unwrap();
        assert_abs_diff_eq!(next.xbar[0], 51.2, epsilon = 1e-12);
        assert_abs_diff_eq!(next.xbar[1], 44.8, epsilon = 1e-12);
        assert_eq!(next.x, s.x);
    }

    #[test]
    fn ring_converges_to_the_stated_average() {
        let l = CommGraph::ring(5).unwrap().laplacian();
        let mut s = ConsensusState::new(DVector::from_vec(vec![52., 44., 47., 48., 49.]));
        let xdot = DVector::zeros(5);
        for _ in 0..3000 {
            s = consensus_step(&s, &xdot, &l, 0.01).unwrap();
        }
        assert_abs_diff_eq!(s.t, 30.0, epsilon = 1e-9);
        for v in s.xbar.iter() {
            assert!((v - 48.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn step_bound_is_enforced() {
        let l = CommGraph::ring(5).unwrap().laplacian();
        let s = ConsensusState::new(DVector::zeros(5));
        let err = consensus_step(&s, &DVector::zeros(5), &l, 0.5).unwrap_err();
        assert_eq!(err, ConsensusError::UnstableStep { h: 0.5, bound: 0.5 });
        assert!(consensus_step(&s, &DVector::zeros(5), &l, 0.0).is_err());
        assert!(matches!(
            consensus_step(&s, &DVector::zeros(4), &l, 0.1),
            Err(ConsensusError::Dimension { .. })
        ));
    }

    #[test]
    fn local_rate_matches_global_row() {
        let g = CommGraph::ring(5).unwrap();
        let xbar = DVector::from_vec(vec![52., 44., 47., 48., 49.]);
        let global = -(g.laplacian() * &xbar);
        for i in 0..5 {
            let r = local_rate(
                0.0,
                xbar[i],
                g.neighbors(i)
                    .into_iter()
                    .map(|j| (g.weight(i, j), xbar[j])),
            );
            assert_abs_diff_eq!(r, global[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn averaging_matrix_cases() {
        assert_eq!(
            averaging_matrix(1).unwrap(),
            DMatrix::from_element(1, 1, 1.0)
        );
        let q = averaging_matrix(5).unwrap();
        assert!(q.iter().all(|&v| v == 0.2));
        assert_abs_diff_eq!(&q * &q, q, epsilon = 1e-15);
        assert_eq!(averaging_matrix(0), Err(ConsensusError::NoAgents));
    }

    #[test]
    fn steady_state_gain_cases() {
        let g = steady_state_gain(&DMatrix::zeros(1, 1), 0.3).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 1.0, epsilon = 1e-15);

        let g = steady_state_gain(&pair_laplacian(), 2.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]);
        assert_abs_diff_eq!(g, expected, epsilon = 1e-15);

        let l = CommGraph::ring(5).unwrap().laplacian();
        let g = steady_state_gain(&l, 1e-6).unwrap();
        assert_abs_diff_eq!(g, averaging_matrix(5).unwrap(), epsilon = 1e-5);

        assert!(steady_state_gain(&l, 0.0).is_err());
    }

    #[test]
    fn singular_shift_is_reported() {
        // not a Laplacian: -1 on the diagonal cancels s = 1
        let m = DMatrix::from_element(1, 1, -1.0);
        assert_eq!(
            steady_state_gain(&m, 1.0),
            Err(ConsensusError::Singular(1.0))
        );
    }
}
