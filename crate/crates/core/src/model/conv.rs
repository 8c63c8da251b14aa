//! Fixed propagation matrices for the message-passing layers.

use crate::graph::Graph;
use crate::tensor::SparseMatrix;

/// `D^-1/2 (A + I) D^-1/2` with degrees counted including the self loop.
pub fn gcn_adjacency(g: &Graph) -> SparseMatrix {
    let n = g.n();
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt()).collect();
    let mut entries = Vec::with_capacity(n + 2 * g.m());
    for i in 0..n {
        entries.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
        for &j in g.neighbors(i) {
            entries.push((i, j, inv_sqrt[i] * inv_sqrt[j]));
        }
    }
    SparseMatrix::from_triplets(n, n, entries)
}

/// Row-normalized adjacency; isolated nodes get an empty row, so their
/// neighbor mean is the zero vector.
pub fn mean_adjacency(g: &Graph) -> SparseMatrix {
    let n = g.n();
    let mut entries = Vec::with_capacity(2 * g.m());
    for i in 0..n {
        let d = g.degree(i) as f64;
        for &j in g.neighbors(i) {
            entries.push((i, j, 1.0 / d));
        }
    }
    SparseMatrix::from_triplets(n, n, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use std::sync::Arc;

    #[test]
    fn gcn_on_single_edge_is_symmetric() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let a = Arc::new(gcn_adjacency(&g));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::eye(2));
        let y = tape.spmm(a, x).unwrap();
        let y = tape.value(y);
        assert!(y.row(0).iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn mean_adjacency_rows() {
        let g = Graph::from_edges(4, &[(0, 1), (0, 2)]).unwrap();
        let m = mean_adjacency(&g).to_dense();
        assert_eq!(m.row(0), &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(m.row(1), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(3), &[0.0; 4]);
    }
}
