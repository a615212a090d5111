//! Convex quadratic programming with dual extraction.
//!
//! Problems are posed in the canonical form shared by every subproblem in
//! this crate:
//!
//! ```text
//!     minimize    1/2 x' P x + q' x
//!     subject to  G x <= h
//!                 A x  = b
//! ```
//!
//! with `P` symmetric positive semidefinite. Solutions carry inequality
//! multipliers `lam >= 0` and equality multipliers `nu`, sharp enough (after
//! the polish pass) to feed the KKT sensitivity system.

pub mod ldl;
pub mod solver;
pub mod sparse;

pub use solver::{solve_qp, IterateState, QpSolver, Settings};
pub use sparse::CscMatrix;

#[derive(Debug, Clone)]
pub struct QPProblem {
    /// Quadratic cost, symmetric PSD, both triangles stored.
    pub p: CscMatrix,
    pub q: Vec<f64>,
    /// Inequalities G x <= h.
    pub g: CscMatrix,
    pub h: Vec<f64>,
    /// Equalities A x = b.
    pub a: CscMatrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QPSolution {
    pub x: Vec<f64>,
    /// Inequality duals, one per row of G, nonnegative.
    pub lam: Vec<f64>,
    /// Equality duals, one per row of A.
    pub nu: Vec<f64>,
    pub status: SolveStatus,
    pub obj: f64,
    pub iters: usize,
    pub prim_res: f64,
    pub dual_res: f64,
    pub comp_res: f64,
    /// Set when status is Infeasible: certificate kind and norm.
    pub infeasibility_cert: Option<(String, f64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quadratic cost is not symmetric")]
    NotSymmetric,
    #[error("quadratic cost is not positive semidefinite")]
    NotPsd,
    #[error("KKT factorization failed: {0}")]
    Factorization(String),
    #[error("numerical failure: non-finite iterate")]
    NumericalFailure,
}

impl QPProblem {
    pub fn new(
        p: CscMatrix,
        q: Vec<f64>,
        g: CscMatrix,
        h: Vec<f64>,
        a: CscMatrix,
        b: Vec<f64>,
    ) -> Self {
        QPProblem { p, q, g, h, a, b }
    }

    /// Problem with no constraints at all.
    pub fn unconstrained(p: CscMatrix, q: Vec<f64>) -> Self {
        let n = q.len();
        QPProblem {
            p,
            q,
            g: CscMatrix::zeros(0, n),
            h: Vec::new(),
            a: CscMatrix::zeros(0, n),
            b: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.q.len();
        if self.p.nrows != n || self.p.ncols != n {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p.nrows, self.p.ncols
            )));
        }
        if self.g.ncols != n || self.g.nrows != self.h.len() {
            return Err(QpError::Dimension(format!(
                "G is {}x{} with h of length {}",
                self.g.nrows,
                self.g.ncols,
                self.h.len()
            )));
        }
        if self.a.ncols != n || self.a.nrows != self.b.len() {
            return Err(QpError::Dimension(format!(
                "A is {}x{} with b of length {}",
                self.a.nrows,
                self.a.ncols,
                self.b.len()
            )));
        }
        if !self.p.is_symmetric(1e-9) {
            return Err(QpError::NotSymmetric);
        }
        if !self.psd_check() {
            return Err(QpError::NotPsd);
        }
        Ok(())
    }

    /// Nonnegative Gershgorin disks prove PSD cheaply; otherwise fall back to
    /// a factorization probe on a lightly shifted copy.
    fn psd_check(&self) -> bool {
        let n = self.p.ncols;
        let mut gershgorin_ok = true;
        for j in 0..n {
            let mut diag = 0.0;
            let mut off = 0.0;
            for (i, v) in self.p.col(j) {
                if i == j {
                    diag = v;
                } else {
                    off += v.abs();
                }
            }
            if diag < 0.0 || diag + 1e-12 < off {
                gershgorin_ok = false;
                break;
            }
        }
        if gershgorin_ok {
            return true;
        }
        let scale = self
            .p
            .values
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(1.0);
        let shift = 1e-9 * scale;
        let mut shifted = Vec::with_capacity(self.p.nnz() + n);
        for j in 0..n {
            for (i, v) in self.p.col(j) {
                shifted.push((i, j, v));
            }
            shifted.push((j, j, shift));
        }
        let m = CscMatrix::from_triplets(n, n, &shifted);
        match ldl::LdlFactor::new(&m) {
            Ok(f) => f.num_negative_pivots() == 0,
            Err(_) => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::sparse::norm_inf;
    use super::*;

    fn diag(vals: &[f64]) -> CscMatrix {
        let t: Vec<(usize, usize, f64)> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| (i, i, v))
            .collect();
        CscMatrix::from_triplets(vals.len(), vals.len(), &t)
    }

    /// min x^2 s.t. x >= 1: KKT by hand gives x* = 1, dual 2.
    #[test]
    fn scalar_bound_dual() {
        let prob = QPProblem::new(
            diag(&[2.0]),
            vec![0.0],
            CscMatrix::from_triplets(1, 1, &[(0, 0, -1.0)]),
            vec![-1.0],
            CscMatrix::zeros(0, 1),
            vec![],
        );
        let sol = solve_qp(&prob, 1e-8, 10_000, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-7, "x = {}", sol.x[0]);
        assert!((sol.lam[0] - 2.0).abs() < 1e-6, "lam = {}", sol.lam[0]);
    }

    /// min ||x - c||^2 s.t. A x = b with an underdetermined A: closed-form
    /// projection via normal equations x = c + A'(AA')^{-1}(b - Ac).
    #[test]
    fn equality_projection_matches_normal_equations() {
        let c = [1.0, -2.0, 0.5, 3.0];
        let a_rows = [[1.0, 1.0, 0.0, -1.0], [0.0, 2.0, -1.0, 0.5]];
        let b = [1.0, -0.5];

        // Oracle: solve the 2x2 normal equations by hand-rolled elimination.
        let mut aat = [[0.0_f64; 2]; 2];
        let mut rhs = [0.0_f64; 2];
        for i in 0..2 {
            for j in 0..2 {
                aat[i][j] = (0..4).map(|k| a_rows[i][k] * a_rows[j][k]).sum();
            }
            let ac: f64 = (0..4).map(|k| a_rows[i][k] * c[k]).sum();
            rhs[i] = b[i] - ac;
        }
        let det = aat[0][0] * aat[1][1] - aat[0][1] * aat[1][0];
        let w = [
            (rhs[0] * aat[1][1] - rhs[1] * aat[0][1]) / det,
            (aat[0][0] * rhs[1] - aat[1][0] * rhs[0]) / det,
        ];
        let expected: Vec<f64> = (0..4)
            .map(|k| c[k] + a_rows[0][k] * w[0] + a_rows[1][k] * w[1])
            .collect();

        let mut a_triplets = Vec::new();
        for (i, row) in a_rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    a_triplets.push((i, j, v));
                }
            }
        }
        let prob = QPProblem::new(
            diag(&[2.0; 4]),
            c.iter().map(|v| -2.0 * v).collect(),
            CscMatrix::zeros(0, 4),
            vec![],
            CscMatrix::from_triplets(2, 4, &a_triplets),
            b.to_vec(),
        );
        let sol = solve_qp(&prob, 1e-9, 20_000, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        for (xi, ei) in sol.x.iter().zip(expected.iter()) {
            assert!((xi - ei).abs() < 1e-6, "{xi} vs {ei}");
        }
    }

    #[test]
    fn kkt_stationarity_invariant() {
        // Random-ish strictly convex QP with boxes; check the stationarity
        // norm bound at optimal status.
        let n = 8;
        let mut pt = Vec::new();
        for i in 0..n {
            pt.push((i, i, 2.0 + i as f64 * 0.3));
            if i + 1 < n {
                pt.push((i, i + 1, 0.4));
                pt.push((i + 1, i, 0.4));
            }
        }
        let p = CscMatrix::from_triplets(n, n, &pt);
        let q: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let mut gt = Vec::new();
        let mut h = Vec::new();
        for i in 0..n {
            gt.push((i, i, 1.0));
            h.push(0.8);
            gt.push((n + i, i, -1.0));
            h.push(0.8);
        }
        let g = CscMatrix::from_triplets(2 * n, n, &gt);
        let prob = QPProblem::new(p.clone(), q.clone(), g.clone(), h, CscMatrix::zeros(0, n), vec![]);
        let tol = 1e-7;
        let sol = solve_qp(&prob, tol, 20_000, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let mut station = p.mul(&sol.x);
        for j in 0..n {
            station[j] += q[j];
        }
        g.mul_transpose_acc(&sol.lam, &mut station, 1.0);
        assert!(
            norm_inf(&station) <= 10.0 * tol,
            "stationarity {}",
            norm_inf(&station)
        );
        assert!(sol.lam.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn warm_start_reduces_iterations() {
        let n = 6;
        let p = diag(&vec![1.0; n]);
        let q = vec![-1.0, 2.0, 0.3, -0.7, 1.1, -2.2];
        let mut gt = Vec::new();
        let mut h = Vec::new();
        for i in 0..n {
            gt.push((i, i, 1.0));
            h.push(0.5);
        }
        let g = CscMatrix::from_triplets(n, n, &gt);
        let prob = QPProblem::new(p, q, g, h, CscMatrix::zeros(0, n), vec![]);
        let cold = solve_qp(&prob, 1e-8, 20_000, None).unwrap();
        let warm = solve_qp(&prob, 1e-8, 20_000, Some(&cold)).unwrap();
        assert_eq!(warm.status, SolveStatus::Optimal);
        assert!(warm.iters <= cold.iters, "{} > {}", warm.iters, cold.iters);
        for (a, b) in warm.x.iter().zip(cold.x.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x <= -1 and x >= 1 cannot both hold.
        let prob = QPProblem::new(
            diag(&[1.0]),
            vec![0.0],
            CscMatrix::from_triplets(2, 1, &[(0, 0, 1.0), (1, 0, -1.0)]),
            vec![-1.0, -1.0],
            CscMatrix::zeros(0, 1),
            vec![],
        );
        let sol = solve_qp(&prob, 1e-6, 20_000, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        assert!(sol.infeasibility_cert.is_some());
    }

    #[test]
    fn detects_unbounded_direction() {
        // min -x with x <= 0 free below: unbounded.
        let prob = QPProblem::new(
            CscMatrix::zeros(1, 1),
            vec![1.0],
            CscMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]),
            vec![0.0],
            CscMatrix::zeros(0, 1),
            vec![],
        );
        let sol = solve_qp(&prob, 1e-6, 20_000, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let prob = QPProblem::new(
            diag(&[1.0, 1.0]),
            vec![0.0],
            CscMatrix::zeros(0, 1),
            vec![],
            CscMatrix::zeros(0, 1),
            vec![],
        );
        assert!(matches!(
            solve_qp(&prob, 1e-6, 100, None),
            Err(QpError::Dimension(_))
        ));
    }

    #[test]
    fn rejects_indefinite_cost() {
        let prob = QPProblem::unconstrained(diag(&[-1.0]), vec![0.0]);
        assert!(matches!(
            solve_qp(&prob, 1e-6, 100, None),
            Err(QpError::NotPsd)
        ));
    }
}
