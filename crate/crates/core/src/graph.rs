//! Weighted directed communication graph between estimation agents.
//!
//! Weights follow the receiver-row convention: `weight(i, j) > 0` means agent
//! `i` listens to agent `j`, i.e. information flows along the arc `j -> i`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type AgentId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("graph must contain at least one agent")]
    Empty,
    #[error("edge {from} -> {to} is a self-loop")]
    SelfLoop { from: AgentId, to: AgentId },
    #[error("edge {from} -> {to} references an agent outside 0..{n}")]
    OutOfRange {
        from: AgentId,
        to: AgentId,
        n: usize,
    },
    #[error("edge {from} -> {to} has non-positive weight {weight}")]
    NonPositiveWeight {
        from: AgentId,
        to: AgentId,
        weight: f64,
    },
    #[error("edge {from} -> {to} is listed more than once")]
    Duplicate { from: AgentId, to: AgentId },
}

/// A directed arc carrying information from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: AgentId,
    pub to: AgentId,
    pub weight: f64,
}

impl Edge {
    pub fn new(from: AgentId, to: AgentId, weight: f64) -> Self {
        Self { from, to, weight }
    }
}

/// Dense adjacency storage; scenarios stay well under a hundred agents.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    weights: DMatrix<f64>,
}

impl CommGraph {
    /// Builds a graph from directed arcs. Every arc must join two distinct
    /// agents in `0..n` with a strictly positive weight, at most once.
    pub fn new(n: usize, edges: &[Edge]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut weights = DMatrix::zeros(n, n);
        let mut seen = HashSet::with_capacity(edges.len());
        for e in edges {
            if e.from >= n || e.to >= n {
                return Err(GraphError::OutOfRange {
                    from: e.from,
                    to: e.to,
                    n,
                });
            }
            if e.from == e.to {
                return Err(GraphError::SelfLoop {
                    from: e.from,
                    to: e.to,
                });
            }
            if !(e.weight > 0.0) || !e.weight.is_finite() {
                return Err(GraphError::NonPositiveWeight {
                    from: e.from,
                    to: e.to,
                    weight: e.weight,
                });
            }
            if !seen.insert((e.from, e.to)) {
                return Err(GraphError::Duplicate {
                    from: e.from,
                    to: e.to,
                });
            }
            weights[(e.to, e.from)] = e.weight;
        }
        Ok(Self { weights })
    }

    /// Builds a graph where every listed edge is mirrored with the same weight.
    pub fn undirected(n: usize, edges: &[Edge]) -> Result<Self, GraphError> {
        let mirrored: Vec<Edge> = edges
            .iter()
            .flat_map(|e| [*e, Edge::new(e.to, e.from, e.weight)])
            .collect();
        Self::new(n, &mirrored)
    }

    /// Undirected unit-weight ring `0 - 1 - ... - (n-1) - 0`.
    pub fn ring(n: usize) -> Result<Self, GraphError> {
        match n {
            0 => Err(GraphError::Empty),
            1 => Self::new(1, &[]),
            2 => Self::undirected(2, &[Edge::new(0, 1, 1.0)]),
            _ => {
                let edges: Vec<Edge> = (0..n).map(|i| Edge::new(i, (i + 1) % n, 1.0)).collect();
                Self::undirected(n, &edges)
            }
        }
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    /// `a_ij`: weight with which agent `i` hears agent `j`.
    pub fn weight(&self, i: AgentId, j: AgentId) -> f64 {
        self.weights[(i, j)]
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Agents that `i` receives from, in ascending order.
    pub fn neighbors(&self, i: AgentId) -> Vec<AgentId> {
        (0..self.n())
            .filter(|&j| self.weights[(i, j)] > 0.0)
            .collect()
    }

    /// Agents that receive from `j`, in ascending order.
    pub fn listeners(&self, j: AgentId) -> Vec<AgentId> {
        (0..self.n())
            .filter(|&i| self.weights[(i, j)] > 0.0)
            .collect()
    }

    /// Directed arcs in row-major order of the adjacency matrix.
    pub fn edges(&self) -> Vec<Edge> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = self.weights[(i, j)];
                if w > 0.0 {
                    out.push(Edge::new(j, i, w));
                }
            }
        }
        out
    }

    /// In-degrees (row sums) and out-degrees (column sums).
    pub fn degrees(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        let in_deg = DVector::from_fn(n, |i, _| self.weights.row(i).iter().sum());
        let out_deg = DVector::from_fn(n, |i, _| self.weights.column(i).iter().sum());
        (in_deg, out_deg)
    }

    pub fn in_degree(&self, i: AgentId) -> f64 {
        self.weights.row(i).iter().sum()
    }

    /// `L = D - A` with `D = diag(in-degrees)`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let (in_deg, _) = self.degrees();
        DMatrix::from_diagonal(&in_deg) - &self.weights
    }

    pub fn is_balanced(&self, tol: f64) -> bool {
        let (d_in, d_out) = self.degrees();
        d_in.iter()
            .zip(d_out.iter())
            .all(|(a, b)| (a - b).abs() <= tol)
    }

    /// True when some agent reaches every other agent along information arcs,
    /// i.e. the graph contains a directed spanning tree.
    pub fn is_connected(&self) -> bool {
        (0..self.n()).any(|root| self.reachable_from(root).iter().all(|&r| r))
    }

    fn reachable_from(&self, root: AgentId) -> Vec<bool> {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(j) = stack.pop() {
            for i in 0..n {
                if !seen[i] && self.weights[(i, j)] > 0.0 {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring3() -> CommGraph {
        CommGraph::undirected(
            3,
            &[
                Edge::new(0, 1, 1.0),
                Edge::new(1, 2, 1.0),
                Edge::new(2, 0, 1.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_agent_is_zero_matrix() {
        let g = CommGraph::new(1, &[]).unwrap();
        assert_eq!(g.adjacency(), &DMatrix::zeros(1, 1));
        assert_eq!(g.laplacian(), DMatrix::zeros(1, 1));
        assert!(g.is_connected());
    }

    #[test]
    fn ring3_arcs() {
        let g = ring3();
        let expected = DMatrix::from_row_slice(3, 3, &[0., 1., 1., 1., 0., 1., 1., 1., 0.]);
        assert_eq!(g.adjacency(), &expected);
        assert_eq!(g.edges().len(), 6);
    }

    #[test]
    fn default_ring_has_ten_unit_arcs() {
        let g = CommGraph::ring(5).unwrap();
        let arcs = g.edges();
        assert_eq!(arcs.len(), 10);
        assert!(arcs.iter().all(|e| e.weight == 1.0));
        for i in 0..5 {
            assert_eq!(g.neighbors(i), {
                let mut v = vec![(i + 1) % 5, (i + 4) % 5];
                v.sort();
                v
            });
        }
    }

    #[test]
    fn degrees_by_hand() {
        let (d, dout) = ring3().degrees();
        assert_eq!(d.as_slice(), &[2.0, 2.0, 2.0]);
        assert_eq!(dout.as_slice(), &[2.0, 2.0, 2.0]);

        let (d, dout) = CommGraph::new(3, &[]).unwrap().degrees();
        assert!(d.iter().chain(dout.iter()).all(|&v| v == 0.0));

        let g = CommGraph::new(2, &[Edge::new(0, 1, 0.5)]).unwrap();
        let (d, dout) = g.degrees();
        assert_eq!(d.as_slice(), &[0.0, 0.5]);
        assert_eq!(dout.as_slice(), &[0.5, 0.0]);
    }

    #[test]
    fn laplacian_by_hand() {
        let expected = DMatrix::from_row_slice(3, 3, &[2., -1., -1., -1., 2., -1., -1., -1., 2.]);
        assert_eq!(ring3().laplacian(), expected);

        let pair = CommGraph::undirected(2, &[Edge::new(0, 1, 1.0)]).unwrap();
        assert_eq!(
            pair.laplacian(),
            DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.])
        );
        assert_eq!(
            CommGraph::new(4, &[]).unwrap().laplacian(),
            DMatrix::zeros(4, 4)
        );
    }

    #[test]
    fn balance() {
        assert!(ring3().is_balanced(0.0));
        let arc = CommGraph::new(2, &[Edge::new(0, 1, 1.0)]).unwrap();
        assert!(!arc.is_balanced(1e-12));
        let cycle = CommGraph::new(
            3,
            &[
                Edge::new(0, 1, 1.0),
                Edge::new(1, 2, 1.0),
                Edge::new(2, 0, 1.0),
            ],
        )
        .unwrap();
        assert!(cycle.is_balanced(0.0));
    }

    #[test]
    fn connectivity() {
        assert!(CommGraph::ring(5).unwrap().is_connected());
        let pairs =
            CommGraph::undirected(4, &[Edge::new(0, 1, 1.0), Edge::new(2, 3, 1.0)]).unwrap();
        assert!(!pairs.is_connected());
        // a directed star rooted at 0 has a spanning tree but no reverse paths
        let star = CommGraph::new(3, &[Edge::new(0, 1, 1.0), Edge::new(0, 2, 1.0)]).unwrap();
        assert!(star.is_connected());
        let sink = CommGraph::new(3, &[Edge::new(1, 0, 1.0), Edge::new(2, 0, 1.0)]).unwrap();
        assert!(!sink.is_connected());
    }

    #[test]
    fn construction_errors_name_the_edge() {
        assert_eq!(
            CommGraph::new(3, &[Edge::new(1, 1, 1.0)]),
            Err(GraphError::SelfLoop { from: 1, to: 1 })
        );
        assert_eq!(
            CommGraph::new(3, &[Edge::new(0, 3, 1.0)]),
            Err(GraphError::OutOfRange {
                from: 0,
                to: 3,
                n: 3
            })
        );
        assert!(matches!(
            CommGraph::new(3, &[Edge::new(0, 1, 0.0)]),
            Err(GraphError::NonPositiveWeight { from: 0, to: 1, .. })
        ));
        assert!(matches!(
            CommGraph::new(3, &[Edge::new(0, 1, -2.0)]),
            Err(GraphError::NonPositiveWeight { .. })
        ));
        assert_eq!(
            CommGraph::new(3, &[Edge::new(0, 1, 1.0), Edge::new(0, 1, 2.0)]),
            Err(GraphError::Duplicate { from: 0, to: 1 })
        );
        assert_eq!(CommGraph::new(0, &[]), Err(GraphError::Empty));
        let err = CommGraph::new(3, &[Edge::new(2, 2, 1.0)]).unwrap_err();
        assert!(err.to_string().contains("2 -> 2"));
    }
}
