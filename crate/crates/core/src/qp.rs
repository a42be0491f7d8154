//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! minimize    1/2 z^T H z + g^T z
//! subject to  E z  = e
//!             C z >= d
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The method starts
//! from the unconstrained minimizer and adds violated constraints one at a
//! time, keeping a QR factorization of the active normals (in the metric of
//! `H`) up to date with Givens rotations.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

/// Failure modes of the QP solver.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    /// No point satisfies the constraints. `violated` is the constraint that
    /// could not be added (equalities first, then inequalities offset by the
    /// equality count) and `active` the constraints whose relaxation already
    /// excludes it.
    #[error("QP infeasible: constraint {violated} cannot be satisfied together with {active:?}")]
    Infeasible { violated: usize, active: Vec<usize> },
    #[error("QP solver hit the iteration limit ({0})")]
    MaxIterations(usize),
    #[error("QP Hessian is not positive definite on the equality null space")]
    NotConvex,
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem with `n` variables.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, matrix: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq_matrix = matrix;
        self.eq_rhs = rhs;
        self
    }

    pub fn with_inequalities(mut self, matrix: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.ineq_matrix = matrix;
        self.ineq_rhs = rhs;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let bad = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.hessian.shape() != (n, n) {
            return bad("Hessian must be n x n");
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return bad("equality block");
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_rhs.len() {
            return bad("inequality block");
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        let finite_v = |m: &DVector<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&self.hessian)
            && finite_v(&self.linear)
            && finite(&self.eq_matrix)
            && finite_v(&self.eq_rhs)
            && finite(&self.ineq_matrix)
            && finite_v(&self.ineq_rhs))
        {
            return bad("non-finite entries");
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// Largest violation of any constraint at `z`.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let eq = (&self.eq_matrix * z - &self.eq_rhs).amax();
        let ineq = (&self.ineq_rhs - &self.ineq_matrix * z).iter().fold(0.0f64, |m, v| m.max(*v));
        eq.max(ineq)
    }

    /// Scaled KKT residual: the maximum of stationarity, primal violation,
    /// negative inequality multipliers and complementarity, divided by
    /// `max(1, |g|_inf)`.
    pub fn kkt_residual(&self, z: &DVector<f64>, eq_mult: &DVector<f64>, ineq_mult: &DVector<f64>) -> f64 {
        let grad = &self.hessian * z + &self.linear
            - self.eq_matrix.transpose() * eq_mult
            - self.ineq_matrix.transpose() * ineq_mult;
        let slack = &self.ineq_matrix * z - &self.ineq_rhs;
        let mut r = grad.amax().max(self.max_violation(z));
        for (mu, s) in ineq_mult.iter().zip(slack.iter()) {
            r = r.max(-mu).max((mu * s).abs());
        }
        r / self.linear.amax().max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// Indices of active inequality constraints, in activation order.
    pub active: Vec<usize>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Precomputed inverse Cholesky factor of a positive definite Hessian,
/// reusable across problems that share it.
#[derive(Debug, Clone)]
pub struct QpFactor {
    hessian: DMatrix<f64>,
    /// `L^{-T}` with `H = L L^T`, so `H^{-1} = J J^T`.
    j0: DMatrix<f64>,
}

impl QpFactor {
    pub fn new(hessian: &DMatrix<f64>) -> Result<Self, QpError> {
        let n = hessian.nrows();
        if hessian.ncols() != n {
            return Err(QpError::Dimension("Hessian must be square".into()));
        }
        let sym = (hessian + hessian.transpose()) * 0.5;
        let chol = Cholesky::new(sym).ok_or(QpError::NotConvex)?;
        let l = chol.l();
        let mut linv = DMatrix::identity(n, n);
        if !l.solve_lower_triangular_mut(&mut linv) {
            return Err(QpError::NotConvex);
        }
        Ok(Self {
            hessian: hessian.clone(),
            j0: linv.transpose(),
        })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// Factor of `[[H, 0], [0, diag(d)]]`, reusing this factor for `H`.
    pub fn extended(&self, diagonal: &[f64]) -> Result<Self, QpError> {
        if diagonal.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(QpError::NotConvex);
        }
        let n = self.hessian.nrows();
        let total = n + diagonal.len();
        let mut hessian = DMatrix::zeros(total, total);
        let mut j0 = DMatrix::zeros(total, total);
        hessian.view_mut((0, 0), (n, n)).copy_from(&self.hessian);
        j0.view_mut((0, 0), (n, n)).copy_from(&self.j0);
        for (i, d) in diagonal.iter().enumerate() {
            hessian[(n + i, n + i)] = *d;
            j0[(n + i, n + i)] = 1.0 / d.sqrt();
        }
        Ok(Self { hessian, j0 })
    }
}

/// Rotates columns `a` and `b` of `m` by `(c, s)`.
fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    let n = m.nrows();
    for i in 0..n {
        let x = m[(i, a)];
        let y = m[(i, b)];
        m[(i, a)] = c * x + s * y;
        m[(i, b)] = -s * x + c * y;
    }
}

/// Rotates rows `a` and `b` of `m` (columns `from..to`) by `(c, s)`.
fn rotate_rows(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64, from: usize, to: usize) {
    for k in from..to {
        let x = m[(a, k)];
        let y = m[(b, k)];
        m[(a, k)] = c * x + s * y;
        m[(b, k)] = -s * x + c * y;
    }
}

struct DualActiveSet {
    /// Constraint normals as columns: equalities, then inequalities.
    normals: DMatrix<f64>,
    rhs: Vec<f64>,
    /// Sign applied to equality normals so they enter as violated `>=` rows.
    sign: Vec<f64>,
    n_eq: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<usize>,
    u: Vec<f64>,
    x: DVector<f64>,
    iterations: usize,
    max_iterations: usize,
}

impl DualActiveSet {
    fn q(&self) -> usize {
        self.active.len()
    }

    fn slack(&self, id: usize) -> f64 {
        self.sign[id] * self.normals.column(id).dot(&self.x) - self.sign[id] * self.rhs[id]
    }

    fn tolerance(&self, id: usize) -> f64 {
        1e-10 * (1.0 + self.rhs[id].abs() + self.normals.column(id).amax() * self.x.amax())
    }

    fn add_to_factor(&mut self, mut d: DVector<f64>) {
        let n = d.len();
        let q = self.q();
        for k in (q + 1..n).rev() {
            let (a, b) = (d[k - 1], d[k]);
            if b == 0.0 {
                continue;
            }
            let rho = a.hypot(b);
            let (c, s) = (a / rho, b / rho);
            d[k - 1] = rho;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
    }

    fn drop_from_factor(&mut self, k: usize) {
        let q = self.q();
        for col in k..q - 1 {
            for i in 0..=col + 1 {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        for col in k..q - 1 {
            let (a, b) = (self.r[(col, col)], self.r[(col + 1, col)]);
            if b != 0.0 {
                let rho = a.hypot(b);
                let (c, s) = (a / rho, b / rho);
                rotate_rows(&mut self.r, col, col + 1, c, s, col, q - 1);
                self.r[(col + 1, col)] = 0.0;
                rotate_columns(&mut self.j, col, col + 1, c, s);
            }
        }
        self.active.remove(k);
        self.u.remove(k);
    }

    /// Adds constraint `p`, dropping blocking inequalities as needed.
    fn add(&mut self, p: usize) -> Result<(), QpError> {
        let n = self.x.len();
        let np = self.normals.column(p) * self.sign[p];
        let mut u_p = 0.0;
        loop {
            self.iterations += 1;
            if self.iterations > self.max_iterations {
                return Err(QpError::MaxIterations(self.max_iterations));
            }
            let q = self.q();
            let d = self.j.tr_mul(&np);
            let mut z = DVector::zeros(n);
            for k in q..n {
                z.axpy(d[k], &self.j.column(k), 1.0);
            }
            // r = R^{-1} d[0..q]
            let mut r = vec![0.0; q];
            for i in (0..q).rev() {
                let mut acc = d[i];
                for k in i + 1..q {
                    acc -= self.r[(i, k)] * r[k];
                }
                r[i] = acc / self.r[(i, i)];
            }
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if self.active[k] >= self.n_eq && r[k] > 0.0 {
                    let ratio = self.u[k] / r[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let d2 = d.rows(q, n - q).norm();
            let dependent = d2 <= 1e-12 * d.norm().max(f64::MIN_POSITIVE);
            let s = self.slack(p);
            let t2 = if dependent {
                f64::INFINITY
            } else {
                -s / z.dot(&np)
            };
            if t1.is_infinite() && t2.is_infinite() {
                if p < self.n_eq && s.abs() <= self.tolerance(p) {
                    // Redundant equality: implied by the active set.
                    return Ok(());
                }
                let mut active = self.active.clone();
                active.sort_unstable();
                return Err(QpError::Infeasible { violated: p, active });
            }
            if t2.is_infinite() {
                for k in 0..q {
                    self.u[k] -= t1 * r[k];
                }
                u_p += t1;
                self.drop_from_factor(drop.expect("finite t1 has a blocking constraint"));
                continue;
            }
            let t = t1.min(t2);
            self.x.axpy(t, &z, 1.0);
            for k in 0..q {
                self.u[k] -= t * r[k];
            }
            u_p += t;
            if t2 <= t1 {
                self.add_to_factor(d);
                self.active.push(p);
                self.u.push(u_p);
                return Ok(());
            }
            self.drop_from_factor(drop.expect("partial step has a blocking constraint"));
        }
    }
}

fn solve_pd(problem: &QpProblem, factor: &QpFactor) -> Result<QpSolution, QpError> {
    let n = problem.num_vars();
    let n_eq = problem.eq_rhs.len();
    let n_in = problem.ineq_rhs.len();
    let mut normals = DMatrix::zeros(n, n_eq + n_in);
    normals.columns_mut(0, n_eq).copy_from(&problem.eq_matrix.transpose());
    normals.columns_mut(n_eq, n_in).copy_from(&problem.ineq_matrix.transpose());
    let rhs: Vec<f64> = problem.eq_rhs.iter().chain(problem.ineq_rhs.iter()).copied().collect();

    let x0 = -(&factor.j0 * factor.j0.tr_mul(&problem.linear));
    let mut solver = DualActiveSet {
        normals,
        rhs,
        sign: vec![1.0; n_eq + n_in],
        n_eq,
        j: factor.j0.clone(),
        r: DMatrix::zeros(n, n),
        active: Vec::new(),
        u: Vec::new(),
        x: x0,
        iterations: 0,
        max_iterations: 50 * (n_eq + n_in) + 100,
    };

    for i in 0..n_eq {
        if solver.slack(i) > 0.0 {
            solver.sign[i] = -1.0;
        }
        solver.add(i)?;
    }
    loop {
        let mut worst = None;
        let mut worst_s = 0.0;
        for i in n_eq..n_eq + n_in {
            if solver.active.contains(&i) {
                continue;
            }
            let s = solver.slack(i);
            if s < -solver.tolerance(i) && s < worst_s {
                worst_s = s;
                worst = Some(i);
            }
        }
        match worst {
            None => break,
            Some(p) => solver.add(p)?,
        }
    }

    let mut eq_mult = DVector::zeros(n_eq);
    let mut ineq_mult = DVector::zeros(n_in);
    for (id, u) in solver.active.iter().zip(&solver.u) {
        if *id < n_eq {
            eq_mult[*id] = solver.sign[*id] * u;
        } else {
            ineq_mult[*id - n_eq] = *u;
        }
    }
    let z = solver.x;
    let active: Vec<usize> = solver.active.iter().filter(|&&i| i >= n_eq).map(|i| i - n_eq).collect();
    Ok(QpSolution {
        objective: problem.objective(&z),
        kkt_residual: problem.kkt_residual(&z, &eq_mult, &ineq_mult),
        z,
        eq_multipliers: eq_mult,
        ineq_multipliers: ineq_mult,
        active,
        iterations: solver.iterations,
    })
}

/// Solves a QP whose Hessian has already been factored.
pub fn solve_qp_factored(problem: &QpProblem, factor: &QpFactor) -> Result<QpSolution, QpError> {
    problem.validate()?;
    if factor.hessian.shape() != problem.hessian.shape() {
        return Err(QpError::Dimension("factor does not match the Hessian".into()));
    }
    solve_pd(problem, factor)
}

/// Solves a convex QP.
///
/// A positive definite Hessian is handled directly; otherwise the equality
/// constraints are eliminated and the Hessian must be positive definite on
/// their null space.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.validate()?;
    if let Ok(factor) = QpFactor::new(&problem.hessian) {
        return solve_pd(problem, &factor);
    }
    solve_nullspace(problem)
}

fn solve_nullspace(problem: &QpProblem) -> Result<QpSolution, QpError> {
    let n = problem.num_vars();
    let e = &problem.eq_matrix;
    if e.nrows() == 0 {
        return Err(QpError::NotConvex);
    }
    let ete = e.transpose() * e;
    let eig = SymmetricEigen::new(ete.clone());
    let lmax = eig.eigenvalues.amax();
    let cut = 1e-12 * lmax.max(f64::MIN_POSITIVE);
    let null: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] <= cut).collect();
    let range: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > cut).collect();
    // Minimum-norm particular solution of E z = e.
    let ete_rhs = e.transpose() * &problem.eq_rhs;
    let mut z0 = DVector::zeros(n);
    for &k in &range {
        let v = eig.eigenvectors.column(k);
        z0.axpy(v.dot(&ete_rhs) / eig.eigenvalues[k], &v, 1.0);
    }
    if (e * &z0 - &problem.eq_rhs).amax() > 1e-9 * (1.0 + problem.eq_rhs.amax()) {
        return Err(QpError::Infeasible {
            violated: 0,
            active: Vec::new(),
        });
    }
    let mut basis = DMatrix::zeros(n, null.len());
    for (c, &k) in null.iter().enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(k));
    }
    let reduced = QpProblem {
        hessian: basis.transpose() * &problem.hessian * &basis,
        linear: basis.transpose() * (&problem.hessian * &z0 + &problem.linear),
        eq_matrix: DMatrix::zeros(0, null.len()),
        eq_rhs: DVector::zeros(0),
        ineq_matrix: &problem.ineq_matrix * &basis,
        ineq_rhs: &problem.ineq_rhs - &problem.ineq_matrix * &z0,
    };
    let factor = QpFactor::new(&reduced.hessian)?;
    let sol = solve_pd(&reduced, &factor).map_err(|err| match err {
        QpError::Infeasible { violated, active } => QpError::Infeasible {
            violated: violated + e.nrows(),
            active: active.into_iter().map(|a| a + e.nrows()).collect(),
        },
        other => other,
    })?;
    let z = &z0 + &basis * &sol.z;
    // Equality multipliers from stationarity, in the least-squares sense.
    let rest = &problem.hessian * &z + &problem.linear - problem.ineq_matrix.transpose() * &sol.ineq_multipliers;
    let e_rest = e * rest;
    let eet = e * e.transpose();
    let eq_mult = crate::sysid::pinv_symmetric(&eet, 1e-12)
        .map(|p| p * e_rest)
        .unwrap_or_else(|_| DVector::zeros(e.nrows()));
    Ok(QpSolution {
        objective: problem.objective(&z),
        kkt_residual: problem.kkt_residual(&z, &eq_mult, &sol.ineq_multipliers),
        z,
        eq_multipliers: eq_mult,
        ineq_multipliers: sol.ineq_multipliers,
        active: sol.active,
        iterations: sol.iterations,
    })
}
