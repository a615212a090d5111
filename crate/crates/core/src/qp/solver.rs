//! Operator-splitting solver for convex quadratic programs.
//!
//! Splitting scheme with over-relaxation on the stacked constraint form
//! `l <= Cx <= u` (equalities carry `l = u`), Ruiz equilibration, a cached
//! quasi-definite KKT factorization, infeasibility certificates and an
//! active-set polish pass that sharpens primal/dual accuracy after
//! convergence. Within a horizon window only the linear cost and the bounds
//! of the subproblems change, so a `QpSolver` holds on to its factorization
//! and warm-starts across repeated solves.

use super::ldl::LdlFactor;
use super::sparse::{dot, norm_inf, CscMatrix};
use super::{QPProblem, QPSolution, QpError, SolveStatus};

const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct Settings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub check_every: usize,
    pub polish: bool,
    pub polish_delta: f64,
    pub adaptive_rho: bool,
    pub adapt_interval: usize,
    pub eps_infeasibility: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            tol: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            check_every: 10,
            polish: true,
            polish_delta: 1e-9,
            adaptive_rho: true,
            adapt_interval: 100,
            eps_infeasibility: 1e-8,
        }
    }
}

/// Saved solver iterate; see [`QpSolver::take_state`].
#[derive(Debug, Clone)]
pub struct IterateState {
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

/// Reusable solver instance. Not re-entrant: one solve at a time per instance.
pub struct QpSolver {
    n: usize,
    m_eq: usize,
    m: usize,
    // Original (unscaled) data.
    p0: CscMatrix,
    q0: Vec<f64>,
    c0: CscMatrix,
    l0: Vec<f64>,
    u0: Vec<f64>,
    // Scaled data.
    ps: CscMatrix,
    qs: Vec<f64>,
    cs: CscMatrix,
    ls: Vec<f64>,
    us: Vec<f64>,
    d_scale: Vec<f64>,
    e_scale: Vec<f64>,
    cost_scale: f64,
    rho: f64,
    rho_vec: Vec<f64>,
    kkt: CscMatrix,
    factor: LdlFactor,
    // Iterate state, kept across solves for warm starting (scaled space).
    xv: Vec<f64>,
    zv: Vec<f64>,
    yv: Vec<f64>,
    pub settings: Settings,
}

struct Residuals {
    prim: f64,
    dual: f64,
    comp: f64,
    eps_prim: f64,
    eps_dual: f64,
    eps_comp: f64,
}

impl Residuals {
    fn converged(&self) -> bool {
        self.prim <= self.eps_prim && self.dual <= self.eps_dual && self.comp <= self.eps_comp
    }
}

impl QpSolver {
    pub fn new(prob: &QPProblem, settings: Settings) -> Result<Self, QpError> {
        prob.validate()?;
        let n = prob.q.len();
        let m_eq = prob.b.len();
        let m_in = prob.h.len();
        let m = m_eq + m_in;

        let c0 = prob.a.vstack(&prob.g);
        let mut l0 = Vec::with_capacity(m);
        let mut u0 = Vec::with_capacity(m);
        l0.extend_from_slice(&prob.b);
        u0.extend_from_slice(&prob.b);
        l0.extend(std::iter::repeat(f64::NEG_INFINITY).take(m_in));
        u0.extend_from_slice(&prob.h);

        let mut solver = QpSolver {
            n,
            m_eq,
            m,
            p0: prob.p.clone(),
            q0: prob.q.clone(),
            c0,
            l0,
            u0,
            ps: CscMatrix::zeros(0, 0),
            qs: Vec::new(),
            cs: CscMatrix::zeros(0, 0),
            ls: Vec::new(),
            us: Vec::new(),
            d_scale: vec![1.0; n],
            e_scale: vec![1.0; m],
            cost_scale: 1.0,
            rho: settings.rho,
            rho_vec: Vec::new(),
            kkt: CscMatrix::zeros(0, 0),
            factor: LdlFactor::new(&CscMatrix::identity(1)).unwrap(),
            xv: vec![0.0; n],
            zv: vec![0.0; m],
            yv: vec![0.0; m],
            settings,
        };
        solver.equilibrate();
        solver.rho_vec = solver.make_rho_vec(solver.rho);
        solver.kkt = solver.build_kkt();
        solver.factor = LdlFactor::new(&solver.kkt).map_err(|e| QpError::Factorization(e.to_string()))?;
        Ok(solver)
    }

    fn make_rho_vec(&self, rho: f64) -> Vec<f64> {
        (0..self.m)
            .map(|i| {
                if i < self.m_eq {
                    (rho * RHO_EQ_FACTOR).clamp(RHO_MIN, RHO_MAX)
                } else {
                    rho.clamp(RHO_MIN, RHO_MAX)
                }
            })
            .collect()
    }

    /// Modified Ruiz equilibration of the joint KKT columns plus cost scaling.
    fn equilibrate(&mut self) {
        let n = self.n;
        let m = self.m;
        self.ps = self.p0.clone();
        self.qs = self.q0.clone();
        self.cs = self.c0.clone();
        self.ls = self.l0.clone();
        self.us = self.u0.clone();

        for _ in 0..self.settings.scaling_iters {
            // Column norms of [P; C] for variables, row norms of C for constraints.
            let mut var_norm = vec![0.0_f64; n];
            for j in 0..n {
                for (_, v) in self.ps.col(j) {
                    var_norm[j] = var_norm[j].max(v.abs());
                }
                for (_, v) in self.cs.col(j) {
                    var_norm[j] = var_norm[j].max(v.abs());
                }
            }
            let mut row_norm = vec![0.0_f64; m];
            for j in 0..n {
                for (i, v) in self.cs.col(j) {
                    row_norm[i] = row_norm[i].max(v.abs());
                }
            }
            let dd: Vec<f64> = var_norm
                .iter()
                .map(|&v| {
                    if v <= 0.0 {
                        1.0
                    } else {
                        (1.0 / v.sqrt()).clamp(MIN_SCALING, MAX_SCALING)
                    }
                })
                .collect();
            let de: Vec<f64> = row_norm
                .iter()
                .map(|&v| {
                    if v <= 0.0 {
                        1.0
                    } else {
                        (1.0 / v.sqrt()).clamp(MIN_SCALING, MAX_SCALING)
                    }
                })
                .collect();
            self.ps.scale(&dd, &dd);
            self.cs.scale(&de, &dd);
            for j in 0..n {
                self.qs[j] *= dd[j];
                self.d_scale[j] *= dd[j];
            }
            for i in 0..m {
                if self.ls[i].is_finite() {
                    self.ls[i] *= de[i];
                }
                if self.us[i].is_finite() {
                    self.us[i] *= de[i];
                }
                self.e_scale[i] *= de[i];
            }
            // Cost scaling.
            let mut p_col_mean = 0.0;
            for j in 0..n {
                let mut cn = 0.0_f64;
                for (_, v) in self.ps.col(j) {
                    cn = cn.max(v.abs());
                }
                p_col_mean += cn;
            }
            p_col_mean /= n.max(1) as f64;
            let qn = norm_inf(&self.qs);
            let denom = p_col_mean.max(qn);
            if denom > 0.0 {
                let gamma = (1.0 / denom).clamp(MIN_SCALING, MAX_SCALING);
                for v in self.ps.values.iter_mut() {
                    *v *= gamma;
                }
                for v in self.qs.iter_mut() {
                    *v *= gamma;
                }
                self.cost_scale *= gamma;
            }
        }
    }

    fn build_kkt(&self) -> CscMatrix {
        let n = self.n;
        let m = self.m;
        let mut triplets = Vec::with_capacity(self.ps.nnz() + 2 * self.cs.nnz() + n + m);
        for j in 0..n {
            for (i, v) in self.ps.col(j) {
                triplets.push((i, j, v));
            }
            triplets.push((j, j, self.settings.sigma));
        }
        for j in 0..n {
            for (i, v) in self.cs.col(j) {
                triplets.push((n + i, j, v));
                triplets.push((j, n + i, v));
            }
        }
        for i in 0..m {
            triplets.push((n + i, n + i, -1.0 / self.rho_vec[i]));
        }
        CscMatrix::from_triplets(n + m, n + m, &triplets)
    }

    /// Replaces the linear cost. The cached factorization is unaffected.
    pub fn update_q(&mut self, q: &[f64]) {
        assert_eq!(q.len(), self.n);
        self.q0.copy_from_slice(q);
        for j in 0..self.n {
            self.qs[j] = q[j] * self.d_scale[j] * self.cost_scale;
        }
    }

    /// Replaces the inequality right-hand side `h`. Factorization unaffected.
    pub fn update_h(&mut self, h: &[f64]) {
        assert_eq!(h.len(), self.m - self.m_eq);
        for (k, &v) in h.iter().enumerate() {
            let i = self.m_eq + k;
            self.u0[i] = v;
            self.us[i] = if v.is_finite() { v * self.e_scale[i] } else { v };
        }
    }

    /// Replaces the equality right-hand side `b`. Factorization unaffected.
    pub fn update_b(&mut self, b: &[f64]) {
        assert_eq!(b.len(), self.m_eq);
        for (i, &v) in b.iter().enumerate() {
            self.l0[i] = v;
            self.u0[i] = v;
            let s = if v.is_finite() { v * self.e_scale[i] } else { v };
            self.ls[i] = s;
            self.us[i] = s;
        }
    }

    /// Seeds the iterate state from a previous solution.
    pub fn warm_start(&mut self, sol: &QPSolution) {
        if sol.x.len() != self.n || sol.nu.len() != self.m_eq || sol.lam.len() != self.m - self.m_eq
        {
            return;
        }
        for j in 0..self.n {
            self.xv[j] = sol.x[j] / self.d_scale[j];
        }
        let mut y = Vec::with_capacity(self.m);
        y.extend_from_slice(&sol.nu);
        y.extend_from_slice(&sol.lam);
        let s = self.c0.mul(&sol.x);
        for i in 0..self.m {
            self.yv[i] = y[i] * self.cost_scale / self.e_scale[i];
            let zi = s[i].clamp(self.l0[i], self.u0[i]);
            self.zv[i] = zi * self.e_scale[i];
        }
    }

    /// Snapshot of the internal (scaled) iterate, for callers multiplexing
    /// one factorized solver across several independent right-hand sides.
    pub fn take_state(&self) -> IterateState {
        IterateState {
            x: self.xv.clone(),
            z: self.zv.clone(),
            y: self.yv.clone(),
        }
    }

    pub fn set_state(&mut self, state: &IterateState) {
        if state.x.len() == self.n && state.z.len() == self.m {
            self.xv.copy_from_slice(&state.x);
            self.zv.copy_from_slice(&state.z);
            self.yv.copy_from_slice(&state.y);
        }
    }

    pub fn reset_state(&mut self) {
        self.xv.iter_mut().for_each(|v| *v = 0.0);
        self.zv.iter_mut().for_each(|v| *v = 0.0);
        self.yv.iter_mut().for_each(|v| *v = 0.0);
    }

    fn unscaled_iterate(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..self.n).map(|j| self.xv[j] * self.d_scale[j]).collect();
        let z: Vec<f64> = (0..self.m).map(|i| self.zv[i] / self.e_scale[i]).collect();
        let y: Vec<f64> = (0..self.m)
            .map(|i| self.yv[i] * self.e_scale[i] / self.cost_scale)
            .collect();
        (x, z, y)
    }

    fn residuals(&self, x: &[f64], z: &[f64], y: &[f64]) -> Residuals {
        let tol = self.settings.tol;
        let s = self.c0.mul(x);
        let mut rp = 0.0_f64;
        for i in 0..self.m {
            rp = rp.max((s[i] - z[i]).abs());
        }
        let eps_prim = tol + tol * norm_inf(&s).max(norm_inf(z));

        let px = self.p0.mul(x);
        let cty = self.c0.mul_transpose(y);
        let mut rd = 0.0_f64;
        for j in 0..self.n {
            rd = rd.max((px[j] + self.q0[j] + cty[j]).abs());
        }
        let eps_dual = tol + tol * norm_inf(&px).max(norm_inf(&self.q0)).max(norm_inf(&cty));

        let mut comp = 0.0_f64;
        for i in 0..self.m {
            let yp = y[i].max(0.0);
            let ym = (-y[i]).max(0.0);
            if yp > 0.0 && self.u0[i].is_finite() {
                comp = comp.max(yp * (self.u0[i] - s[i]).abs());
            }
            if ym > 0.0 && self.l0[i].is_finite() {
                comp = comp.max(ym * (s[i] - self.l0[i]).abs());
            }
        }
        let eps_comp = (tol + tol * norm_inf(&s).max(norm_inf(z))) * (1.0 + norm_inf(y));
        Residuals {
            prim: rp,
            dual: rd,
            comp,
            eps_prim,
            eps_dual,
            eps_comp,
        }
    }

    fn objective(&self, x: &[f64]) -> f64 {
        0.5 * dot(&self.p0.mul(x), x) + dot(&self.q0, x)
    }

    fn primal_infeasibility_cert(&self, dy: &[f64]) -> Option<f64> {
        let nd = norm_inf(dy);
        if nd <= 1e-12 {
            return None;
        }
        let eps = self.settings.eps_infeasibility * nd;
        let ct_dy = self.c0.mul_transpose(dy);
        if norm_inf(&ct_dy) > eps {
            return None;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            let dp = dy[i].max(0.0);
            let dm = dy[i].min(0.0);
            if !self.u0[i].is_finite() && dp > eps {
                return None;
            }
            if !self.l0[i].is_finite() && dm < -eps {
                return None;
            }
            if self.u0[i].is_finite() {
                support += self.u0[i] * dp;
            }
            if self.l0[i].is_finite() {
                support += self.l0[i] * dm;
            }
        }
        if support < -eps {
            Some(nd)
        } else {
            None
        }
    }

    fn dual_infeasibility_cert(&self, dx: &[f64]) -> Option<f64> {
        let nd = norm_inf(dx);
        if nd <= 1e-12 {
            return None;
        }
        let eps = self.settings.eps_infeasibility * nd;
        if norm_inf(&self.p0.mul(dx)) > eps {
            return None;
        }
        if dot(&self.q0, dx) > -eps {
            return None;
        }
        let cdx = self.c0.mul(dx);
        for i in 0..self.m {
            if self.u0[i].is_finite() && cdx[i] > eps {
                return None;
            }
            if self.l0[i].is_finite() && cdx[i] < -eps {
                return None;
            }
        }
        Some(nd)
    }

    fn adapt_rho(&mut self, res: &Residuals) -> Result<bool, QpError> {
        let pr = res.prim / res.eps_prim.max(1e-12);
        let dr = res.dual / res.eps_dual.max(1e-12);
        let ratio = (pr / dr.max(1e-12)).sqrt();
        if !(0.2..=5.0).contains(&ratio) {
            let new_rho = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
            if (new_rho / self.rho - 1.0).abs() > 1e-9 {
                self.rho = new_rho;
                self.rho_vec = self.make_rho_vec(new_rho);
                self.kkt = self.build_kkt();
                self.factor
                    .refactor(&self.kkt)
                    .map_err(|e| QpError::Factorization(e.to_string()))?;
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn solve(&mut self) -> Result<QPSolution, QpError> {
        let n = self.n;
        let m = self.m;
        let alpha = self.settings.alpha;
        let mut rhs = vec![0.0_f64; n + m];
        let mut x_check = self.xv.clone();
        let mut y_check = self.yv.clone();
        let mut status = SolveStatus::MaxIter;
        let mut cert: Option<(String, f64)> = None;
        let mut iters = self.settings.max_iter;

        for iter in 1..=self.settings.max_iter {
            rhs[..n]
                .iter_mut()
                .enumerate()
                .for_each(|(j, r)| *r = self.settings.sigma * self.xv[j] - self.qs[j]);
            for i in 0..m {
                rhs[n + i] = self.zv[i] - self.yv[i] / self.rho_vec[i];
            }
            self.factor.solve_in_place(&mut rhs);

            for j in 0..n {
                let xt = rhs[j];
                self.xv[j] = alpha * xt + (1.0 - alpha) * self.xv[j];
            }
            for i in 0..m {
                let nu = rhs[n + i];
                let zt = self.zv[i] + (nu - self.yv[i]) / self.rho_vec[i];
                let z_pre = alpha * zt + (1.0 - alpha) * self.zv[i];
                let v = z_pre + self.yv[i] / self.rho_vec[i];
                let z_new = v.clamp(self.ls[i], self.us[i]);
                self.yv[i] += self.rho_vec[i] * (z_pre - z_new);
                self.zv[i] = z_new;
            }

            if iter % self.settings.check_every == 0 || iter == self.settings.max_iter {
                let (x, z, y) = self.unscaled_iterate();
                if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
                    return Err(QpError::NumericalFailure);
                }
                let res = self.residuals(&x, &z, &y);
                if res.converged() {
                    status = SolveStatus::Optimal;
                    iters = iter;
                    break;
                }
                // Certificates from the drift since the previous check.
                let dy: Vec<f64> = (0..m)
                    .map(|i| y[i] - y_check[i] * self.e_scale[i] / self.cost_scale)
                    .collect();
                let dx: Vec<f64> = (0..n)
                    .map(|j| x[j] - x_check[j] * self.d_scale[j])
                    .collect();
                if let Some(nrm) = self.primal_infeasibility_cert(&dy) {
                    status = SolveStatus::Infeasible;
                    cert = Some(("primal".into(), nrm));
                    iters = iter;
                    break;
                }
                if let Some(nrm) = self.dual_infeasibility_cert(&dx) {
                    status = SolveStatus::Infeasible;
                    cert = Some(("dual (objective unbounded)".into(), nrm));
                    iters = iter;
                    break;
                }
                x_check.copy_from_slice(&self.xv);
                y_check.copy_from_slice(&self.yv);
                if self.settings.adaptive_rho && iter % self.settings.adapt_interval == 0 {
                    self.adapt_rho(&res)?;
                }
            }
        }

        let (mut x, mut z, mut y) = self.unscaled_iterate();
        if status == SolveStatus::Optimal && self.settings.polish {
            if let Some((px, py)) = self.polish(&x, &y) {
                // Adoption test: the polished KKT system is consistent by
                // construction, so stationarity alone cannot discriminate.
                // Require true bound feasibility and correctly signed
                // inequality duals, then compare residuals.
                let viol = |xx: &[f64]| -> f64 {
                    let s = self.c0.mul(xx);
                    let mut v = 0.0_f64;
                    for i in 0..m {
                        if self.l0[i].is_finite() {
                            v = v.max(self.l0[i] - s[i]);
                        }
                        if self.u0[i].is_finite() {
                            v = v.max(s[i] - self.u0[i]);
                        }
                    }
                    v
                };
                let bad_dual = py[self.m_eq..]
                    .iter()
                    .fold(0.0_f64, |mm, &v| mm.max(-v));
                let old = self.residuals(&x, &z, &y);
                let new = self.residuals(&px, &px_z(&self.c0, &px, &self.l0, &self.u0), &py);
                let tol = self.settings.tol;
                if viol(&px) <= viol(&x).max(tol * 0.1)
                    && bad_dual <= tol
                    && new.dual <= old.dual.max(1e-12)
                {
                    z = px_z(&self.c0, &px, &self.l0, &self.u0);
                    x = px;
                    y = py;
                }
            }
        }

        let res = self.residuals(&x, &z, &y);
        let mut nu = y[..self.m_eq].to_vec();
        let mut lam = y[self.m_eq..].to_vec();
        // Inequality duals are nonnegative at optimality; clip solver noise.
        for v in lam.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if status == SolveStatus::Infeasible {
            nu.iter_mut().for_each(|v| *v = 0.0);
            lam.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(QPSolution {
            obj: self.objective(&x),
            x,
            lam,
            nu,
            status,
            iters,
            prim_res: res.prim,
            dual_res: res.dual,
            comp_res: res.comp,
            infeasibility_cert: cert,
        })
    }

    /// Equality-constrained resolve on the detected active set. Sharpens both
    /// the primal solution and the dual multipliers.
    fn polish(&self, _x: &[f64], y: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let delta = self.settings.polish_delta;
        // Equality rows are always active; inequality rows where the dual is
        // strictly positive sit on their upper bound.
        let mut active: Vec<usize> = (0..self.m_eq).collect();
        for i in self.m_eq..self.m {
            if y[i] > 0.0 {
                active.push(i);
            }
        }
        let ma = active.len();
        let mut triplets = Vec::new();
        for j in 0..n {
            for (i, v) in self.p0.col(j) {
                triplets.push((i, j, v));
            }
            triplets.push((j, j, delta));
        }
        // Rows of C restricted to the active set.
        let mut row_map = vec![usize::MAX; self.m];
        for (k, &i) in active.iter().enumerate() {
            row_map[i] = k;
        }
        for j in 0..n {
            for (i, v) in self.c0.col(j) {
                let k = row_map[i];
                if k != usize::MAX {
                    triplets.push((n + k, j, v));
                    triplets.push((j, n + k, v));
                }
            }
        }
        for k in 0..ma {
            triplets.push((n + k, n + k, -delta));
        }
        let kkt = CscMatrix::from_triplets(n + ma, n + ma, &triplets);
        let factor = LdlFactor::new(&kkt).ok()?;

        let mut rhs = vec![0.0; n + ma];
        for j in 0..n {
            rhs[j] = -self.q0[j];
        }
        for (k, &i) in active.iter().enumerate() {
            rhs[n + k] = self.u0[i];
        }
        // Iterative refinement against the unregularized system.
        let mut sol = factor.solve(&rhs);
        for _ in 0..3 {
            let mut resid = rhs.clone();
            // resid -= K0 * sol with K0 the unregularized KKT.
            {
                let (sx, sy) = sol.split_at(n);
                let px = self.p0.mul(sx);
                let mut cty = vec![0.0; n];
                let mut cx = vec![0.0; ma];
                for j in 0..n {
                    for (i, v) in self.c0.col(j) {
                        let k = row_map[i];
                        if k != usize::MAX {
                            cty[j] += v * sy[k];
                            cx[k] += v * sx[j];
                        }
                    }
                }
                for j in 0..n {
                    resid[j] -= px[j] + cty[j];
                }
                for k in 0..ma {
                    resid[n + k] -= cx[k];
                }
            }
            if norm_inf(&resid) < 1e-14 {
                break;
            }
            let corr = factor.solve(&resid);
            for (s, c) in sol.iter_mut().zip(corr.iter()) {
                *s += c;
            }
        }
        let px = sol[..n].to_vec();
        let mut py = vec![0.0; self.m];
        for (k, &i) in active.iter().enumerate() {
            py[i] = sol[n + k];
        }
        if px.iter().any(|v| !v.is_finite()) || py.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((px, py))
    }
}

fn px_z(c: &CscMatrix, x: &[f64], l: &[f64], u: &[f64]) -> Vec<f64> {
    let s = c.mul(x);
    s.iter()
        .enumerate()
        .map(|(i, &v)| v.clamp(l[i], u[i]))
        .collect()
}

/// One-shot convenience wrapper around [`QpSolver`].
pub fn solve_qp(
    prob: &QPProblem,
    tol: f64,
    max_iter: usize,
    warm: Option<&QPSolution>,
) -> Result<QPSolution, QpError> {
    let settings = Settings {
        tol,
        max_iter,
        ..Settings::default()
    };
    let mut solver = QpSolver::new(prob, settings)?;
    if let Some(w) = warm {
        solver.warm_start(w);
    }
    solver.solve()
}
