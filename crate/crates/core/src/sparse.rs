//! Symmetric positive-definite sparse solves with a bandwidth-reducing
//! ordering.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};

/// Reverse Cuthill-McKee ordering. `order[new] = old`. Each connected
/// component starts from a minimum-degree vertex.
pub fn rcm_order(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    for &start in &by_degree {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adjacency[v].iter().copied().filter(|&u| !seen[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            next.dedup();
            for u in next {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// A prefactored SPD matrix.
pub struct SpdSolver {
    order: Vec<usize>,
    chol: CscCholesky<f64>,
}

impl std::fmt::Debug for SpdSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdSolver").field("n", &self.order.len()).finish()
    }
}

impl SpdSolver {
    /// Factors the symmetric matrix given by `(row, col, value)` triplets;
    /// both triangles must be present and duplicates are summed.
    pub fn factor(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j, _) in triplets {
            if i != j {
                adjacency[i].push(j);
            }
        }
        let order = rcm_order(&adjacency);
        let mut position = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        let mut coo = CooMatrix::new(n, n);
        for &(i, j, v) in triplets {
            coo.push(position[i], position[j], v);
        }
        let csc = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&csc)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(SpdSolver { order, chol })
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    /// Solves for every column of `rhs` (`n x m`).
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let m = rhs.ncols();
        let mut permuted = DMatrix::zeros(n, m);
        for (new, &old) in self.order.iter().enumerate() {
            for c in 0..m {
                permuted[(new, c)] = rhs[(old, c)];
            }
        }
        let x = self.chol.solve(&permuted);
        let mut out = DMatrix::zeros(n, m);
        for (new, &old) in self.order.iter().enumerate() {
            for c in 0..m {
                out[(old, c)] = x[(new, c)];
            }
        }
        out
    }
}
