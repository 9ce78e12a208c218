//! Square linear solves for the Newton and interior-point iterations.
//!
//! Systems are assembled as triplets; duplicates are summed. Small systems
//! go through a dense partial-pivoting LU, larger ones through a sparse LU.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, Mat};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("singular linear system of dimension {dim} (condition estimate {condition:e})")]
pub struct SingularMatrix {
    pub dim: usize,
    /// Ratio of the largest to the smallest pivot magnitude; infinite when a
    /// pivot vanished.
    pub condition: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Dense,
    Sparse,
}

/// Square system under assembly.
#[derive(Debug, Clone)]
pub struct Triplets {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(dim: usize) -> Self {
        Triplets { dim, entries: Vec::new() }
    }

    pub fn with_capacity(dim: usize, cap: usize) -> Self {
        Triplets { dim, entries: Vec::with_capacity(cap) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.dim]; self.dim];
        for &(r, c, v) in &self.entries {
            m[r][c] += v;
        }
        m
    }

    /// Sorted (column-major) entries with duplicates summed.
    fn merged(&self) -> Vec<(usize, usize, f64)> {
        let mut e = self.entries.clone();
        e.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (r, c, v) in e {
            match out.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => out.push((r, c, v)),
            }
        }
        out
    }

    pub fn solve(&self, rhs: &[f64], backend: Backend) -> Result<Vec<f64>, SingularMatrix> {
        self.factor(backend)?.solve(rhs)
    }

    /// Factorizes the assembled matrix for one or more solves.
    pub fn factor(&self, backend: Backend) -> Result<Factorization, SingularMatrix> {
        let n = self.dim;
        match backend {
            Backend::Dense => {
                let mut a = Mat::<f64>::zeros(n, n);
                for &(r, c, v) in &self.entries {
                    a[(r, c)] += v;
                }
                let lu = a.partial_piv_lu();
                let u = lu.U();
                let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
                for i in 0..n {
                    let d = u[(i, i)].abs();
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
                if n > 0 && (!(lo > 0.0) || !(hi / lo < 1e18)) {
                    return Err(SingularMatrix { dim: n, condition: hi / lo });
                }
                Ok(Factorization::Dense(lu))
            }
            Backend::Sparse => {
                let triplets: Vec<Triplet<usize, usize, f64>> = self
                    .merged()
                    .into_iter()
                    .map(|(r, c, v)| Triplet::new(r, c, v))
                    .collect();
                let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
                    .map_err(|_| SingularMatrix { dim: n, condition: f64::NAN })?;
                let lu = a
                    .sp_lu()
                    .map_err(|_| SingularMatrix { dim: n, condition: f64::INFINITY })?;
                Ok(Factorization::Sparse(lu, n))
            }
        }
    }
}

/// An LU factorization ready for repeated solves.
pub enum Factorization {
    Dense(PartialPivLu<f64>),
    Sparse(Lu<usize, f64>, usize),
}

impl Factorization {
    pub fn dim(&self) -> usize {
        match self {
            Factorization::Dense(lu) => lu.U().nrows(),
            Factorization::Sparse(_, n) => *n,
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, SingularMatrix> {
        let n = rhs.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let b = Col::<f64>::from_fn(n, |i| rhs[i]);
        let x = match self {
            Factorization::Dense(lu) => lu.solve(&b),
            Factorization::Sparse(lu, _) => lu.solve(&b),
        };
        let x: Vec<f64> = (0..n).map(|i| x[i]).collect();
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(SingularMatrix { dim: n, condition: f64::INFINITY })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn system() -> Triplets {
        let mut t = Triplets::new(3);
        t.push(0, 0, 4.0);
        t.push(0, 1, 1.0);
        t.push(1, 0, 1.0);
        t.push(1, 1, 2.0);
        t.push(1, 1, 1.0);
        t.push(2, 2, 5.0);
        t.push(2, 0, -1.0);
        t
    }

    #[test]
    fn dense_and_sparse_agree() {
        let t = system();
        let rhs = [1.0, 2.0, 3.0];
        let xd = t.solve(&rhs, Backend::Dense).unwrap();
        let xs = t.solve(&rhs, Backend::Sparse).unwrap();
        let m = t.to_dense();
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| m[i][j] * xd[j]).sum();
            assert!((r - rhs[i]).abs() < 1e-14);
            assert!((xd[i] - xs[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_detected() {
        let mut t = Triplets::new(2);
        t.push(0, 0, 1.0);
        t.push(0, 1, 2.0);
        t.push(1, 0, 2.0);
        t.push(1, 1, 4.0);
        assert!(t.solve(&[1.0, 1.0], Backend::Dense).is_err());
        assert!(t.solve(&[1.0, 1.0], Backend::Sparse).is_err());
    }
}
