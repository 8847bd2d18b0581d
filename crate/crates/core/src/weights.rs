//! Stochastic mixing matrices.
//!
//! Entry `w[(i, j)]` is the weight robot `i` places on the value received
//! from robot `j`, so it may be nonzero only when `j` can send to `i`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::{Error, Result};

/// Tolerance for row/column sums.
pub const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StochasticKind {
    Row,
    Column,
    Doubly,
}

impl StochasticKind {
    fn rows_sum_to_one(self) -> bool {
        matches!(self, StochasticKind::Row | StochasticKind::Doubly)
    }

    fn columns_sum_to_one(self) -> bool {
        matches!(self, StochasticKind::Column | StochasticKind::Doubly)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    values: DMatrix<f64>,
    kind: StochasticKind,
    graph_fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape {
        rows: usize,
        cols: usize,
        n: usize,
    },
    Negative {
        i: usize,
        j: usize,
        value: f64,
    },
    /// Nonzero weight on a pair the graph cannot deliver.
    Sparsity {
        i: usize,
        j: usize,
    },
    RowSum {
        i: usize,
        sum: f64,
    },
    ColumnSum {
        j: usize,
        sum: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape { rows, cols, n } => {
                write!(f, "matrix is {rows}x{cols}, graph has {n} vertices")
            }
            Violation::Negative { i, j, value } => write!(f, "w[{i},{j}] = {value} < 0"),
            Violation::Sparsity { i, j } => {
                write!(f, "w[{i},{j}] nonzero but {j} cannot send to {i}")
            }
            Violation::RowSum { i, sum } => write!(f, "row {i} sums to {sum}"),
            Violation::ColumnSum { j, sum } => write!(f, "column {j} sums to {sum}"),
        }
    }
}

impl WeightMatrix {
    /// Wraps an arbitrary matrix; use [`validate`] to check it.
    pub fn from_parts(values: DMatrix<f64>, kind: StochasticKind, graph: &Graph) -> Self {
        Self {
            values,
            kind,
            graph_fingerprint: graph.fingerprint(),
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn kind(&self) -> StochasticKind {
        self.kind
    }

    pub fn graph_fingerprint(&self) -> u64 {
        self.graph_fingerprint
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Errors unless this matrix was built against `graph`.
    pub fn ensure_built_for(&self, graph: &Graph) -> Result<()> {
        if self.graph_fingerprint != graph.fingerprint() {
            return Err(Error::Contract(
                "weight matrix was built for a different communication graph".into(),
            ));
        }
        Ok(())
    }
}

/// Metropolis weights: `1 / max(|N_i|, |N_j|)` on each edge, the remainder on
/// the diagonal. Symmetric and doubly stochastic.
pub fn metropolis(g: &Graph) -> Result<WeightMatrix> {
    if g.is_directed() {
        return Err(Error::Contract(
            "Metropolis weights assume an undirected communication graph".into(),
        ));
    }
    let n = g.n_vertices();
    let mut w = DMatrix::zeros(n, n);
    for (i, j) in g.edges() {
        let v = 1.0 / g.neighbors(i).len().max(g.neighbors(j).len()) as f64;
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = g.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
        // d copies of 1/d can sum past 1 by an ulp
        w[(i, i)] = (1.0 - off).max(0.0);
    }
    Ok(WeightMatrix::from_parts(w, StochasticKind::Doubly, g))
}

/// Each robot splits weight evenly over itself and its in-neighbors.
pub fn uniform_row_stochastic(g: &Graph) -> WeightMatrix {
    let n = g.n_vertices();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let ins = g.in_neighbors(i);
        let v = 1.0 / (ins.len() + 1) as f64;
        w[(i, i)] = v;
        for &j in ins {
            w[(i, j)] = v;
        }
    }
    WeightMatrix::from_parts(w, StochasticKind::Row, g)
}

/// Each robot splits its outgoing mass evenly over itself and its
/// out-neighbors.
pub fn uniform_column_stochastic(g: &Graph) -> WeightMatrix {
    let n = g.n_vertices();
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        let outs = g.out_neighbors(j);
        let v = 1.0 / (outs.len() + 1) as f64;
        w[(j, j)] = v;
        for &i in outs {
            w[(i, j)] = v;
        }
    }
    WeightMatrix::from_parts(w, StochasticKind::Column, g)
}

/// Lists every way `w` fails to be a `w.kind()`-stochastic matrix
/// compatible with `g`. Empty means valid.
pub fn validate(w: &WeightMatrix, g: &Graph) -> Vec<Violation> {
    let n = g.n_vertices();
    let m = w.values();
    if m.nrows() != n || m.ncols() != n {
        return vec![Violation::Shape {
            rows: m.nrows(),
            cols: m.ncols(),
            n,
        }];
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let v = m[(i, j)];
            if v < 0.0 {
                out.push(Violation::Negative { i, j, value: v });
            }
            if i != j && v != 0.0 && !g.has_arc(j, i) {
                out.push(Violation::Sparsity { i, j });
            }
        }
    }
    if w.kind().rows_sum_to_one() {
        for i in 0..n {
            let sum = m.row(i).sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                out.push(Violation::RowSum { i, sum });
            }
        }
    }
    if w.kind().columns_sum_to_one() {
        for j in 0..n {
            let sum = m.column(j).sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                out.push(Violation::ColumnSum { j, sum });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Directedness;

    #[test]
    fn metropolis_two_nodes() {
        let w = metropolis(&Graph::path(2).unwrap()).unwrap();
        assert_eq!(w.values(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn metropolis_star_center_is_not_negative() {
        let g = Graph::new(10, Directedness::Undirected, (1..10).map(|j| (0, j))).unwrap();
        let w = metropolis(&g).unwrap();
        assert_eq!(w.values()[(0, 0)], 0.0);
        assert!(validate(&w, &g).is_empty());
    }

    #[test]
    fn metropolis_path_three() {
        let w = metropolis(&Graph::path(3).unwrap()).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.5]);
        assert_eq!(w.values(), &expected);
    }

    #[test]
    fn metropolis_complete_four() {
        let w = metropolis(&Graph::complete(4).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((w.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn metropolis_isolated_vertex_keeps_itself() {
        let g = Graph::new(3, Directedness::Undirected, [(0, 1)]).unwrap();
        let w = metropolis(&g).unwrap();
        assert_eq!(w.get(2, 2), 1.0);
        assert!(validate(&w, &g).is_empty());
    }

    #[test]
    fn metropolis_rejects_directed() {
        let g = Graph::new(2, Directedness::Directed, [(0, 1)]).unwrap();
        assert!(metropolis(&g).is_err());
    }

    #[test]
    fn uniform_examples() {
        let single = Graph::empty(1, Directedness::Directed).unwrap();
        assert_eq!(uniform_row_stochastic(&single).values()[(0, 0)], 1.0);

        let chain = Graph::new(2, Directedness::Directed, [(0, 1)]).unwrap();
        let w = uniform_row_stochastic(&chain);
        assert_eq!(w.values().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(w.values().row(1).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert!(validate(&w, &chain).is_empty());

        let cycle = Graph::new(3, Directedness::Directed, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let w = uniform_row_stochastic(&cycle);
        for i in 0..3 {
            let halves = w.values().row(i).iter().filter(|&&v| v == 0.5).count();
            assert_eq!(halves, 2);
        }
        let c = uniform_column_stochastic(&chain);
        assert_eq!(c.kind(), StochasticKind::Column);
        assert!(validate(&c, &chain).is_empty());
        assert_eq!(c.get(1, 0), 0.5);
        assert_eq!(c.get(0, 0), 0.5);
        assert_eq!(c.get(1, 1), 1.0);
    }

    #[test]
    fn validate_examples() {
        let path = Graph::path(3).unwrap();
        let w = metropolis(&path).unwrap();
        assert!(validate(&w, &path).is_empty());

        let edgeless = Graph::empty(3, Directedness::Undirected).unwrap();
        let mut sparsity: Vec<(usize, usize)> = validate(&w, &edgeless)
            .into_iter()
            .filter_map(|v| match v {
                Violation::Sparsity { i, j } => Some((i, j)),
                _ => None,
            })
            .collect();
        sparsity.sort();
        assert_eq!(sparsity, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);

        let g1 = Graph::empty(1, Directedness::Undirected).unwrap();
        let bad = WeightMatrix::from_parts(DMatrix::from_element(1, 1, 0.9), StochasticKind::Row, &g1);
        let v = validate(&bad, &g1);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::RowSum { i: 0, .. }));
    }

    #[test]
    fn fingerprint_guard() {
        let w = metropolis(&Graph::path(3).unwrap()).unwrap();
        assert!(w.ensure_built_for(&Graph::path(3).unwrap()).is_ok());
        assert!(w.ensure_built_for(&Graph::complete(3).unwrap()).is_err());
    }
}
