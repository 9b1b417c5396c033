//! Dual active-set solver for strictly convex quadratic programs.
//!
//! Minimizes `½ xᵀGx + aᵀx` subject to linear equalities, box bounds and an
//! optional bound on `‖x‖₁`. The ℓ1 ball is never enumerated: its supporting
//! halfspaces `sᵀx ≤ L` with `s = sign(x)` are generated when violated, so
//! only the handful that end up active are ever factored.
//!
//! The iteration follows Goldfarb and Idnani: start from the unconstrained
//! minimizer, add the most violated constraint, and take primal/dual steps
//! that keep the active set dual feasible. `J = L⁻ᵀQ` and the triangular `R`
//! from the QR of `L⁻¹N` are maintained with Givens rotations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::cholesky;

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    Equality(usize),
    Lower(usize),
    Upper(usize),
    /// `sᵀx ≤ L` for the stored sign pattern.
    Leverage(Vec<i8>),
}

#[derive(Debug, Clone)]
pub struct QpProblem<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub linear: &'a DVector<f64>,
    /// Rows `nᵀx = b`.
    pub equalities: Vec<(DVector<f64>, f64)>,
    pub lower: Option<&'a DVector<f64>>,
    pub upper: Option<&'a DVector<f64>>,
    pub l1_bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Active constraints with their multipliers, in the convention
    /// `Gx + a = Σ u_j n_j` where each constraint reads `n_jᵀx ≥ b_j`.
    pub active: Vec<(ConstraintKind, f64)>,
    pub iterations: usize,
}

struct Row {
    kind: ConstraintKind,
    normal: DVector<f64>,
    rhs: f64,
    /// -1 when an equality was stored with its sign reversed.
    orientation: f64,
}

const FEAS_TOL: f64 = 1e-12;

fn sign_pattern(x: &DVector<f64>) -> Vec<i8> {
    x.iter()
        .map(|&v| {
            if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// `(constraint, normal, rhs, scaled violation)` of the most violated
/// inequality at `x`; ties go to the first in bound-then-leverage order.
fn most_violated(p: &QpProblem<'_>, x: &DVector<f64>) -> Option<Row> {
    let n = x.len();
    let mut best: Option<(f64, Row)> = None;
    let mut consider = |viol: f64, make: &dyn Fn() -> Row| {
        if viol > FEAS_TOL && best.as_ref().is_none_or(|(b, _)| viol > *b) {
            best = Some((viol, make()));
        }
    };
    if let Some(lo) = p.lower {
        for i in 0..n {
            if lo[i].is_finite() {
                consider(lo[i] - x[i], &|| {
                    let mut e = DVector::zeros(n);
                    e[i] = 1.0;
                    Row {
                        kind: ConstraintKind::Lower(i),
                        normal: e,
                        rhs: lo[i],
                        orientation: 1.0,
                    }
                });
            }
        }
    }
    if let Some(hi) = p.upper {
        for i in 0..n {
            if hi[i].is_finite() {
                consider(x[i] - hi[i], &|| {
                    let mut e = DVector::zeros(n);
                    e[i] = -1.0;
                    Row {
                        kind: ConstraintKind::Upper(i),
                        normal: e,
                        rhs: -hi[i],
                        orientation: 1.0,
                    }
                });
            }
        }
    }
    if let Some(l) = p.l1_bound {
        let s = sign_pattern(x);
        let nnz = s.iter().filter(|&&v| v != 0).count().max(1) as f64;
        let viol = (x.lp_norm(1) - l) / nnz.sqrt();
        consider(viol, &|| Row {
            normal: DVector::from_iterator(n, s.iter().map(|&v| -(v as f64))),
            rhs: -l,
            kind: ConstraintKind::Leverage(s.clone()),
            orientation: 1.0,
        });
    }
    best.map(|(_, r)| r)
}

/// Applies a Givens rotation to columns `k` and `k + 1` of `j`.
fn rotate_columns(j: &mut DMatrix<f64>, k: usize, c: f64, s: f64) {
    let n = j.nrows();
    let (left, right) = j.as_mut_slice().split_at_mut((k + 1) * n);
    let a = &mut left[k * n..];
    let b = &mut right[..n];
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa + s * yb;
        *y = -s * xa + c * yb;
    }
}

struct Factors {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factors {
    fn add(&mut self, d: &mut DVector<f64>) {
        let n = d.len();
        let q = self.q;
        for k in ((q + 1)..n).rev() {
            let (a, b) = (d[k - 1], d[k]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.q += 1;
    }

    fn drop(&mut self, k: usize) {
        let q = self.q;
        for col in k..(q - 1) {
            for row in 0..=(col + 1) {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for col in k..(q - 1) {
            let (a, b) = (self.r[(col, col)], self.r[(col + 1, col)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for cc in col..(q - 1) {
                let ra = self.r[(col, cc)];
                let rb = self.r[(col + 1, cc)];
                self.r[(col, cc)] = c * ra + s * rb;
                self.r[(col + 1, cc)] = -s * ra + c * rb;
            }
            self.r[(col + 1, col)] = 0.0;
            rotate_columns(&mut self.j, col, c, s);
        }
        self.q -= 1;
    }

    /// `R⁻¹ d[..q]` by back substitution.
    fn r_solve(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q;
        let mut out = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in (i + 1)..q {
                acc -= self.r[(i, k)] * out[k];
            }
            out[i] = acc / self.r[(i, i)];
        }
        out
    }
}

/// Cholesky factor of the Hessian and `J = L⁻ᵀ`, reusable across problems
/// that share a Hessian.
pub struct QpFactor {
    chol: Cholesky<f64, Dyn>,
    j: DMatrix<f64>,
}

impl QpFactor {
    pub fn new(hessian: &DMatrix<f64>) -> Result<Self> {
        let n = hessian.nrows();
        let chol = cholesky(hessian, "quadratic program")?;
        let j = chol
            .l()
            .transpose()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or(Error::Singular {
                context: "quadratic program",
                condition: f64::INFINITY,
            })?;
        Ok(Self { chol, j })
    }

    pub fn dim(&self) -> usize {
        self.j.nrows()
    }
}

pub fn solve(p: &QpProblem<'_>) -> Result<QpSolution> {
    solve_with(p, &QpFactor::new(p.hessian)?)
}

/// Solves with a precomputed factor of `p.hessian`.
pub fn solve_with(p: &QpProblem<'_>, factor: &QpFactor) -> Result<QpSolution> {
    let n = p.linear.len();
    if p.hessian.shape() != (n, n) || factor.dim() != n {
        return Err(Error::Dimension("qp: hessian and linear term disagree".into()));
    }
    if p.equalities.iter().any(|(row, _)| row.len() != n)
        || p.lower.is_some_and(|v| v.len() != n)
        || p.upper.is_some_and(|v| v.len() != n)
    {
        return Err(Error::Dimension("qp: constraint of wrong length".into()));
    }
    let chol = &factor.chol;
    let mut f = Factors {
        j: factor.j.clone(),
        r: DMatrix::zeros(n, n),
        q: 0,
    };
    let mut x = -chol.solve(p.linear);
    let mut active: Vec<Row> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let n_eq = p.equalities.len();
    let max_iter = 50 * (n + n_eq) + 200;
    let mut iter = 0;
    let mut next_eq = 0;

    loop {
        let (row, is_eq) = if next_eq < n_eq {
            let (nrm, b) = &p.equalities[next_eq];
            let orientation = if nrm.dot(&x) - b > 0.0 { -1.0 } else { 1.0 };
            let row = Row {
                kind: ConstraintKind::Equality(next_eq),
                normal: nrm * orientation,
                rhs: b * orientation,
                orientation,
            };
            next_eq += 1;
            (row, true)
        } else {
            match most_violated(p, &x) {
                Some(r) => (r, false),
                None => break,
            }
        };
        let mut u_plus = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::NoConvergence(max_iter));
            }
            let mut d = f.j.tr_mul(&row.normal);
            let q = f.q;
            let mut z = DVector::zeros(n);
            let mut d2 = 0.0;
            for k in q..n {
                if d[k] != 0.0 {
                    z.axpy(d[k], &f.j.column(k), 1.0);
                    d2 += d[k] * d[k];
                }
            }
            let r = f.r_solve(&d);
            let mut t1 = f64::INFINITY;
            let mut drop_k = None;
            for (k, rk) in r.iter().enumerate() {
                if matches!(active[k].kind, ConstraintKind::Equality(_)) {
                    continue;
                }
                if *rk > 0.0 {
                    let ratio = u[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_k = Some(k);
                    }
                }
            }
            let slack = row.normal.dot(&x) - row.rhs;
            let dn = d.norm_squared();
            let t2 = if d2 <= 1e-14 * dn.max(f64::MIN_POSITIVE) {
                f64::INFINITY
            } else {
                -slack / d2
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                if is_eq && slack.abs() <= FEAS_TOL * (1.0 + row.rhs.abs()) {
                    break;
                }
                return Err(Error::Infeasible(format!(
                    "{:?} cannot be satisfied together with the active constraints",
                    row.kind
                )));
            }
            if t2.is_infinite() {
                for k in 0..q {
                    u[k] -= t * r[k];
                }
                u_plus += t;
                let k = drop_k.expect("finite partial step has a blocking constraint");
                f.drop(k);
                active.remove(k);
                u.remove(k);
                continue;
            }
            x.axpy(t, &z, 1.0);
            for k in 0..q {
                u[k] -= t * r[k];
            }
            u_plus += t;
            if t2 <= t1 {
                f.add(&mut d);
                active.push(row);
                u.push(u_plus);
                break;
            }
            let k = drop_k.unwrap();
            f.drop(k);
            active.remove(k);
            u.remove(k);
        }
    }

    Ok(QpSolution {
        x,
        active: active
            .into_iter()
            .zip(u)
            .map(|(row, m)| (row.kind, m * row.orientation))
            .collect(),
        iterations: iter,
    })
}

/// Normal and right-hand side of a constraint in `nᵀx ≥ b` form.
pub fn constraint_row(kind: &ConstraintKind, p: &QpProblem<'_>, n: usize) -> (DVector<f64>, f64) {
    match kind {
        ConstraintKind::Equality(i) => p.equalities[*i].clone(),
        ConstraintKind::Lower(i) => {
            let mut e = DVector::zeros(n);
            e[*i] = 1.0;
            (e, p.lower.unwrap()[*i])
        }
        ConstraintKind::Upper(i) => {
            let mut e = DVector::zeros(n);
            e[*i] = -1.0;
            (e, -p.upper.unwrap()[*i])
        }
        ConstraintKind::Leverage(s) => (
            DVector::from_iterator(n, s.iter().map(|&v| -(v as f64))),
            -p.l1_bound.unwrap(),
        ),
    }
}
