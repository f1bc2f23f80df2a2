//! Dense convex QP solver.
//!
//! Dual active-set method: start at the unconstrained minimum, force the
//! equality rows into the active set in order, then repeatedly add the most
//! violated inequality, dropping blocking actives as their multipliers hit
//! zero. Equalities are never dropped. The method needs no feasible starting
//! point and certifies inconsistent constraints with a Farkas combination.
//!
//! Minimize `½·xᵀHx + gᵀx` subject to `A_eq·x = b_eq` and `A_in·x ≥ b_in`.
//! `H` must be symmetric positive semidefinite; a singular `H` is shifted by
//! `1e-9·max(1, max diag)` internally, while the reported objective always
//! uses the caller's `H`.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    /// Problem with no constraints; rows are added by the caller.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> QpProblem {
        let n = g.len();
        QpProblem {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    fn check_shapes(&self) -> Result<(), QpError> {
        let n = self.n();
        let ok = self.h.nrows() == n
            && self.h.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.ncols() == n
            && self.a_in.nrows() == self.b_in.len();
        if ok {
            Ok(())
        } else {
            Err(QpError::Shape)
        }
    }

    /// Row `i` of the combined constraint stack, equalities first.
    fn row(&self, i: usize) -> (DVector<f64>, f64) {
        let meq = self.a_eq.nrows();
        if i < meq {
            (self.a_eq.row(i).transpose(), self.b_eq[i])
        } else {
            (self.a_in.row(i - meq).transpose(), self.b_in[i - meq])
        }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.h * x).dot(x) + self.g.dot(x)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("constraint matrices do not match the variable count")]
    Shape,
    #[error("Hessian is not positive semidefinite")]
    NotConvex,
    #[error("constraints are inconsistent")]
    Infeasible {
        /// Farkas coefficients, `(combined row index, coefficient)`:
        /// nonnegative on inequality rows, Σλ·a = 0, Σλ·b > 0.
        certificate: Vec<(usize, f64)>,
    },
    #[error("active-set iteration limit {0} exceeded")]
    IterationLimit(usize),
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Objective under the caller's Hessian, no regularization.
    pub objective: f64,
    /// Multiplier per combined row (equalities first), oriented so the KKT
    /// stationarity reads `Hx + g = A_eqᵀλ_eq + A_inᵀλ_in`, `λ_in ≥ 0`.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
}

/// Residual magnitudes of the KKT system at a proposed solution.
#[derive(Clone, Copy, Debug)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_in: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_in)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> KktReport {
    let meq = p.a_eq.nrows();
    let lam_eq = sol.multipliers.rows(0, meq).into_owned();
    let lam_in = sol.multipliers.rows(meq, p.a_in.nrows()).into_owned();
    let grad = &p.h * &sol.x + &p.g
        - p.a_eq.transpose() * &lam_eq
        - p.a_in.transpose() * &lam_in;
    let eq_res = if meq > 0 {
        (p.a_eq.clone() * &sol.x - &p.b_eq).amax()
    } else {
        0.0
    };
    let (mut in_res, mut dual, mut comp) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..p.a_in.nrows() {
        let slack = p.a_in.row(i).transpose().dot(&sol.x) - p.b_in[i];
        in_res = in_res.max(-slack);
        dual = dual.max(-lam_in[i]);
        comp = comp.max((lam_in[i] * slack).abs());
    }
    KktReport {
        stationarity: if grad.is_empty() { 0.0 } else { grad.amax() },
        primal_eq: eq_res,
        primal_in: in_res,
        dual,
        complementarity: comp,
    }
}

/// Checks a Farkas certificate against the problem rows: the combination must
/// cancel the constraint normals while demanding a positive right-hand side,
/// with nonnegative weights on inequality rows.
pub fn validate_certificate(p: &QpProblem, certificate: &[(usize, f64)]) -> bool {
    let meq = p.a_eq.nrows();
    let mut combo = DVector::zeros(p.n());
    let mut rhs = 0.0;
    for &(i, c) in certificate {
        if i >= meq + p.a_in.nrows() {
            return false;
        }
        if i >= meq && c < -1e-9 {
            return false;
        }
        let (a, b) = p.row(i);
        combo += c * a;
        rhs += c * b;
    }
    let scale: f64 = certificate.iter().map(|&(_, c)| c.abs()).sum::<f64>().max(1.0);
    combo.amax() <= 1e-7 * scale && rhs > 1e-9 * scale
}

struct Workspace {
    /// `L⁻ᵀ·Q`: columns past `q` span the reduced null space of the actives.
    j: DMatrix<f64>,
    /// Upper-triangular factor with `Jᵀ·N_active = [R; 0]`.
    r: DMatrix<f64>,
    active: Vec<usize>,
    u: Vec<f64>,
}

impl Workspace {
    fn q(&self) -> usize {
        self.active.len()
    }

    /// Rotates `d`'s tail into position `q` and installs it as R's new column.
    fn add(&mut self, row: usize, mult: f64, d: &mut DVector<f64>) {
        let n = d.len();
        let q = self.q();
        for i in ((q + 1)..n).rev() {
            apply_givens(d, &mut self.j, i - 1, i);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(row);
        self.u.push(mult);
    }

    /// Removes active position `k`, restoring R's triangularity.
    fn drop(&mut self, k: usize) {
        let q = self.q();
        self.active.remove(k);
        self.u.remove(k);
        for col in (k + 1)..q {
            let src = self.r.column(col).into_owned();
            self.r.column_mut(col - 1).copy_from(&src);
        }
        for col in k..(q - 1) {
            // Zero the subdiagonal left by the column shift.
            let (a, b) = (self.r[(col, col)], self.r[(col + 1, col)]);
            let (c, s) = givens(a, b);
            for jcol in col..(q - 1) {
                let (x, y) = (self.r[(col, jcol)], self.r[(col + 1, jcol)]);
                self.r[(col, jcol)] = c * x + s * y;
                self.r[(col + 1, jcol)] = -s * x + c * y;
            }
            rotate_columns(&mut self.j, col, col + 1, c, s);
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
    }

    /// Solves `R·r = d₁` for the dual step of the current actives.
    fn dual_direction(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.q();
        let mut r = DVector::zeros(q);
        for i in (0..q).rev() {
            let mut s = d[i];
            for j in (i + 1)..q {
                s -= self.r[(i, j)] * r[j];
            }
            r[i] = s / self.r[(i, i)];
        }
        r
    }
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let h = a.hypot(b);
        (a / h, b / h)
    }
}

/// Rotates entries (i-1, i) of `d` to zero `d[i]`, mirroring the rotation on
/// J's columns so `J·d` is preserved.
fn apply_givens(d: &mut DVector<f64>, j: &mut DMatrix<f64>, p: usize, q: usize) {
    if d[q] == 0.0 {
        return;
    }
    let (c, s) = givens(d[p], d[q]);
    d[p] = c * d[p] + s * d[q];
    d[q] = 0.0;
    rotate_columns(j, p, q, c, s);
}

fn rotate_columns(j: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let (x, y) = (j[(row, p)], j[(row, q)]);
        j[(row, p)] = c * x + s * y;
        j[(row, q)] = -s * x + c * y;
    }
}

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, QpError> {
    p.check_shapes()?;
    let n = p.n();
    let meq = p.a_eq.nrows();
    let m = meq + p.a_in.nrows();

    // A singular PSD Hessian can factor "successfully" with garbage pivots,
    // so judge conditioning by the pivots themselves before trusting it. The
    // bump trades a ~1e-9 relative pull on cost-flat directions for keeping
    // the inverse factor well enough conditioned that KKT residuals stay
    // below 1e-7 at unit scale; both margins are exercised by the random
    // enumeration test.
    let maxdiag = p.h.diagonal().amax().max(1.0);
    let chol = match nalgebra::Cholesky::new(p.h.clone()) {
        Some(c) if (0..n).all(|i| c.l_dirty()[(i, i)].powi(2) > 1e-11 * maxdiag) => c,
        _ => {
            let mut h = p.h.clone();
            for i in 0..n {
                h[(i, i)] += 1e-9 * maxdiag;
            }
            nalgebra::Cholesky::new(h).ok_or(QpError::NotConvex)?
        }
    };

    let mut x = -chol.solve(&p.g);
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("Cholesky factor is invertible");
    let mut ws = Workspace {
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        active: Vec::new(),
        u: Vec::new(),
    };
    // Equality rows processed with flipped orientation when their residual
    // starts positive; multipliers are unflipped at the end.
    let mut flipped = vec![false; meq];

    let iter_limit = 100 * (n + m).max(10);
    let mut iterations = 0usize;

    let enforce = |ws: &mut Workspace,
                       x: &mut DVector<f64>,
                       row: usize,
                       nvec: &DVector<f64>,
                       s0: f64,
                       iterations: &mut usize|
     -> Result<EnforceOutcome, QpError> {
        let mut s = s0;
        let mut u_new = 0.0f64;
        loop {
            *iterations += 1;
            if *iterations > iter_limit {
                return Err(QpError::IterationLimit(iter_limit));
            }
            let q = ws.q();
            let mut d = ws.j.tr_mul(nvec);
            // zᵀn = |d₂|², so the null-space component decides primal motion.
            let zn: f64 = (q..n).map(|i| d[i] * d[i]).sum();
            let z_is_zero = zn <= 1e-24 * d.norm_squared().max(1.0);
            let r = ws.dual_direction(&d);

            let mut t1 = f64::INFINITY;
            let mut k1 = None;
            for k in 0..q {
                if ws.active[k] >= meq && r[k] > 0.0 {
                    let ratio = ws.u[k] / r[k];
                    if ratio < t1 {
                        t1 = ratio;
                        k1 = Some(k);
                    }
                }
            }
            let t2 = if z_is_zero { f64::INFINITY } else { -s / zn };

            if t1.is_infinite() && t2.is_infinite() {
                if s >= -1e-10 * s0.abs().max(1.0) {
                    // Linearly dependent but consistent: redundant row.
                    return Ok(EnforceOutcome::Redundant);
                }
                let mut certificate = vec![(row, 1.0)];
                for k in 0..q {
                    if r[k] != 0.0 {
                        certificate.push((ws.active[k], -r[k]));
                    }
                }
                return Err(QpError::Infeasible { certificate });
            }

            if t2.is_infinite() {
                for k in 0..q {
                    ws.u[k] -= t1 * r[k];
                }
                u_new += t1;
                ws.drop(k1.unwrap());
                continue;
            }

            let t = t1.min(t2);
            for i in 0..n {
                let mut step = 0.0;
                for c in q..n {
                    step += ws.j[(i, c)] * d[c];
                }
                x[i] += t * step;
            }
            s += t * zn;
            for k in 0..q {
                ws.u[k] -= t * r[k];
            }
            u_new += t;

            if t2 <= t1 {
                ws.add(row, u_new, &mut d);
                return Ok(EnforceOutcome::Added);
            }
            ws.drop(k1.unwrap());
        }
    };

    for i in 0..meq {
        let (mut a, b) = p.row(i);
        let mut s = a.dot(&x) - b;
        if s > 0.0 {
            a.neg_mut();
            s = -s;
            flipped[i] = true;
        }
        enforce(&mut ws, &mut x, i, &a, s, &mut iterations).map_err(|e| unflip(e, &flipped))?;
    }

    loop {
        let mut worst = 0.0f64;
        let mut pick = None;
        for i in meq..m {
            if ws.active.contains(&i) {
                continue;
            }
            let (a, b) = p.row(i);
            let s = a.dot(&x) - b;
            let tol = 1e-10 * b.abs().max(1.0);
            if s < -tol && s < worst {
                worst = s;
                pick = Some((i, a, s));
            }
        }
        let Some((i, a, s)) = pick else { break };
        match enforce(&mut ws, &mut x, i, &a, s, &mut iterations) {
            Ok(_) => {}
            Err(e) => return Err(unflip(e, &flipped)),
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (k, &row) in ws.active.iter().enumerate() {
        let sign = if row < meq && flipped[row] { -1.0 } else { 1.0 };
        multipliers[row] = sign * ws.u[k];
    }
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        multipliers,
        iterations,
    })
}

enum EnforceOutcome {
    Added,
    Redundant,
}

/// Certificate coefficients refer to internally flipped equality rows; restore
/// the caller's orientation.
fn unflip(e: QpError, flipped: &[bool]) -> QpError {
    match e {
        QpError::Infeasible { certificate } => QpError::Infeasible {
            certificate: certificate
                .into_iter()
                .map(|(i, c)| {
                    if i < flipped.len() && flipped[i] {
                        (i, -c)
                    } else {
                        (i, c)
                    }
                })
                .collect(),
        },
        other => other,
    }
}
