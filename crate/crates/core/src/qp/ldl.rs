//! Sparse LDL' factorization for quasi-definite KKT systems.
//!
//! Up-looking factorization over the elimination tree, no pivoting. The
//! caller is responsible for handing in a quasi-definite matrix (positive
//! block on the diagonal, negated regularization on the constraint block),
//! which guarantees a factorization exists under any symmetric permutation.
//! A reverse Cuthill-McKee permutation keeps fill-in low on the
//! time-structured dispatch problems this crate produces.

use super::sparse::CscMatrix;

const UNKNOWN: usize = usize::MAX;

/// Symmetric permutation computed by reverse Cuthill-McKee on the matrix
/// pattern. `perm[new] = old`.
pub fn rcm_ordering(pattern: &CscMatrix) -> Vec<usize> {
    let n = pattern.ncols;
    // Symmetric adjacency without the diagonal.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for (i, _) in pattern.col(j) {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    // Process components from their minimum-degree vertex.
    let mut seeds: Vec<usize> = (0..n).collect();
    seeds.sort_unstable_by_key(|&v| (degree[v], v));
    for seed in seeds {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_unstable_by_key(|&u| (degree[u], u));
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Numeric LDL' factor of a permuted symmetric matrix.
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    // Upper-triangular permuted input (pattern reused on refactorization).
    upper: CscMatrix,
    etree: Vec<usize>,
    l_colptr: Vec<usize>,
    l_rowidx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum LdlError {
    #[error("zero pivot encountered at column {0}")]
    ZeroPivot(usize),
    #[error("matrix is not square")]
    NotSquare,
}

impl LdlFactor {
    /// Factors the full symmetric matrix `m` (both triangles stored).
    pub fn new(m: &CscMatrix) -> Result<Self, LdlError> {
        if m.nrows != m.ncols {
            return Err(LdlError::NotSquare);
        }
        let n = m.ncols;
        let perm = rcm_ordering(m);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        // Permuted upper triangle, with every diagonal entry present.
        let mut triplets = Vec::with_capacity(m.nnz() / 2 + n);
        for j in 0..n {
            for (i, v) in m.col(j) {
                let (pi, pj) = (iperm[i], iperm[j]);
                if pi <= pj {
                    triplets.push((pi, pj, v));
                }
            }
        }
        for k in 0..n {
            triplets.push((k, k, 0.0));
        }
        let upper = CscMatrix::from_triplets(n, n, &triplets);

        let mut fac = LdlFactor {
            n,
            perm,
            iperm,
            upper,
            etree: Vec::new(),
            l_colptr: Vec::new(),
            l_rowidx: Vec::new(),
            l_values: Vec::new(),
            d: vec![0.0; n],
            dinv: vec![0.0; n],
        };
        fac.symbolic();
        fac.numeric()?;
        Ok(fac)
    }

    /// Re-runs the numeric factorization after the values of the original
    /// matrix changed but its pattern did not.
    pub fn refactor(&mut self, m: &CscMatrix) -> Result<(), LdlError> {
        let n = self.n;
        // Reset stored upper values, then scatter the new ones.
        for v in self.upper.values.iter_mut() {
            *v = 0.0;
        }
        for j in 0..n {
            for (i, v) in m.col(j) {
                let (pi, pj) = (self.iperm[i], self.iperm[j]);
                if pi <= pj {
                    let lo = self.upper.col_ptr[pj];
                    let hi = self.upper.col_ptr[pj + 1];
                    let slot = self.upper.row_idx[lo..hi]
                        .binary_search(&pi)
                        .expect("pattern changed between factorizations");
                    self.upper.values[lo + slot] += v;
                }
            }
        }
        self.numeric()
    }

    fn symbolic(&mut self) {
        let n = self.n;
        let up = &self.upper;
        let mut etree = vec![UNKNOWN; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![UNKNOWN; n];
        for j in 0..n {
            work[j] = j;
            for p in up.col_ptr[j]..up.col_ptr[j + 1] {
                let mut i = up.row_idx[p];
                debug_assert!(i <= j);
                while i < j && work[i] != j {
                    if etree[i] == UNKNOWN {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut colptr = Vec::with_capacity(n + 1);
        colptr.push(0usize);
        for j in 0..n {
            colptr.push(colptr[j] + lnz[j]);
        }
        let total = colptr[n];
        self.etree = etree;
        self.l_colptr = colptr;
        self.l_rowidx = vec![0; total];
        self.l_values = vec![0.0; total];
    }

    fn numeric(&mut self) -> Result<(), LdlError> {
        let n = self.n;
        let up = &self.upper;
        let mut y_val = vec![0.0_f64; n];
        let mut y_marker = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_in_col: Vec<usize> = self.l_colptr[..n].to_vec();

        for k in 0..n {
            let mut nnz_y = 0usize;
            self.d[k] = 0.0;
            for p in up.col_ptr[k]..up.col_ptr[k + 1] {
                let i = up.row_idx[p];
                let v = up.values[p];
                if i == k {
                    self.d[k] = v;
                    continue;
                }
                y_val[i] = v;
                let mut next = i;
                if !y_marker[next] {
                    y_marker[next] = true;
                    elim[0] = next;
                    let mut nnz_e = 1usize;
                    next = self.etree[next];
                    while next != UNKNOWN && next < k {
                        if y_marker[next] {
                            break;
                        }
                        y_marker[next] = true;
                        elim[nnz_e] = next;
                        nnz_e += 1;
                        next = self.etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        y_idx[nnz_y] = elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for s in (0..nnz_y).rev() {
                let cidx = y_idx[s];
                let yv = y_val[cidx];
                for p in self.l_colptr[cidx]..next_in_col[cidx] {
                    y_val[self.l_rowidx[p]] -= self.l_values[p] * yv;
                }
                let slot = next_in_col[cidx];
                let lkj = yv * self.dinv[cidx];
                self.l_rowidx[slot] = k;
                self.l_values[slot] = lkj;
                self.d[k] -= yv * lkj;
                next_in_col[cidx] += 1;
                y_val[cidx] = 0.0;
                y_marker[cidx] = false;
            }
            if self.d[k] == 0.0 {
                return Err(LdlError::ZeroPivot(self.perm[k]));
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Solves M x = b in place on the original (unpermuted) indexing.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x = vec![0.0; n];
        for new in 0..n {
            x[new] = b[self.perm[new]];
        }
        // L y = b
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                    x[self.l_rowidx[p]] -= self.l_values[p] * xj;
                }
            }
        }
        // D z = y
        for j in 0..n {
            x[j] *= self.dinv[j];
        }
        // L' w = z
        for j in (0..n).rev() {
            let mut acc = x[j];
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                acc -= self.l_values[p] * x[self.l_rowidx[p]];
            }
            x[j] = acc;
        }
        for new in 0..n {
            b[self.perm[new]] = x[new];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Number of negative pivots, useful as a quasi-definiteness check.
    pub fn num_negative_pivots(&self) -> usize {
        self.d.iter().filter(|&&v| v < 0.0).count()
    }
}
