//! Dense strictly convex QP solver.
//!
//! minimize ½ zᵀ H z + fᵀ z + c0  s.t.  Aeq z = beq,  G z ≤ g.
//!
//! Equalities are removed by a nullspace substitution; the reduced problem is
//! solved with a dual active-set method (Goldfarb–Idnani), which starts from the
//! unconstrained minimizer and needs no phase-1 point. The constraint added at
//! each step is the most violated one, ties broken by lowest id.

use crate::matops::{symmetrize, Mat, Vector};
use nalgebra::{Cholesky, SymmetricEigen};
use thiserror::Error;

pub const FEAS_TOL: f64 = 1e-9;
pub const KKT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP is infeasible")]
    Infeasible,
    #[error("QP hit the iteration cap ({0})")]
    MaxIterations(usize),
    #[error("QP Hessian is singular on the feasible subspace")]
    Degenerate,
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Debug)]
pub struct Qp {
    pub h: Mat,
    pub f: Vector,
    pub c0: f64,
    pub aeq: Mat,
    pub beq: Vector,
    pub g: Mat,
    pub gv: Vector,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: Vector,
    pub value: f64,
    /// Ids (row indices of the stacked inequality block) of active constraints, ascending.
    pub active_set: Vec<usize>,
    /// One multiplier per inequality row; zero for inactive rows.
    pub multipliers: Vector,
    pub eq_multipliers: Vector,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl Qp {
    pub fn new(h: Mat, f: Vector, c0: f64) -> Self {
        let n = f.len();
        Qp { h, f, c0, aeq: Mat::zeros(0, n), beq: Vector::zeros(0), g: Mat::zeros(0, n), gv: Vector::zeros(0) }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.g.nrows()
    }

    pub fn with_equalities(mut self, aeq: Mat, beq: Vector) -> Self {
        self.aeq = aeq;
        self.beq = beq;
        self
    }

    /// Append a block G z ≤ g; rows get consecutive ids.
    pub fn push_ineq(&mut self, g: &Mat, gv: &Vector) {
        let n = self.dim();
        assert_eq!(g.ncols(), n);
        assert_eq!(g.nrows(), gv.len());
        let m0 = self.g.nrows();
        let mut ng = Mat::zeros(m0 + g.nrows(), n);
        ng.view_mut((0, 0), (m0, n)).copy_from(&self.g);
        ng.view_mut((m0, 0), (g.nrows(), n)).copy_from(g);
        let mut nv = Vector::zeros(m0 + gv.len());
        nv.rows_mut(0, m0).copy_from(&self.gv);
        nv.rows_mut(m0, gv.len()).copy_from(gv);
        self.g = ng;
        self.gv = nv;
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z) + self.c0
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.h.shape() != (n, n) {
            return Err(QpError::Dimension(format!("H is {:?}, f has {}", self.h.shape(), n)));
        }
        if self.aeq.ncols() != n || self.aeq.nrows() != self.beq.len() {
            return Err(QpError::Dimension("equality block".into()));
        }
        if self.g.ncols() != n || self.g.nrows() != self.gv.len() {
            return Err(QpError::Dimension("inequality block".into()));
        }
        Ok(())
    }
}

struct Reduced {
    zp: Vector,
    basis: Option<Mat>,
    h: Mat,
    f: Vector,
    g: Mat,
    gv: Vector,
}

impl Reduced {
    fn lift(&self, u: &Vector) -> Vector {
        match &self.basis {
            Some(z) => &self.zp + z * u,
            None => u.clone(),
        }
    }
}

fn reduce(qp: &Qp) -> Result<Reduced, QpError> {
    qp.validate()?;
    let n = qp.dim();
    if qp.aeq.nrows() == 0 {
        return Ok(Reduced {
            zp: Vector::zeros(n),
            basis: None,
            h: symmetrize(&qp.h),
            f: qp.f.clone(),
            g: qp.g.clone(),
            gv: qp.gv.clone(),
        });
    }
    let gram = qp.aeq.transpose() * &qp.aeq;
    let eig = SymmetricEigen::new(symmetrize(&gram));
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let tol = lmax * 1e-12 * n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rank = order.iter().filter(|&&k| eig.eigenvalues[k] > tol).count();
    let rhs = qp.aeq.transpose() * &qp.beq;
    let mut zp = Vector::zeros(n);
    for &k in &order[..rank] {
        let v = eig.eigenvectors.column(k);
        zp += v * (v.dot(&rhs) / eig.eigenvalues[k]);
    }
    let resid = (&qp.aeq * &zp - &qp.beq).amax();
    if resid > FEAS_TOL * (1.0 + qp.beq.amax()) {
        return Err(QpError::Infeasible);
    }
    let mut basis = Mat::zeros(n, n - rank);
    for (c, &k) in order[rank..].iter().enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(k));
    }
    let h = symmetrize(&(basis.transpose() * &qp.h * &basis));
    let f = basis.transpose() * (&qp.h * &zp + &qp.f);
    let g = &qp.g * &basis;
    let gv = &qp.gv - &qp.g * &zp;
    Ok(Reduced { zp, basis: Some(basis), h, f, g, gv })
}

fn finish(qp: &Qp, red: &Reduced, u: &Vector, active: &[usize], lam: &[f64], iterations: usize) -> QpSolution {
    let z = red.lift(u);
    let m = qp.n_ineq();
    let mut mult = Vector::zeros(m);
    for (&a, &l) in active.iter().zip(lam) {
        mult[a] = l;
    }
    let mut act: Vec<usize> = active.to_vec();
    act.sort_unstable();
    let grad = &qp.h * &z + &qp.f + qp.g.transpose() * &mult;
    let me = qp.aeq.nrows();
    let eq_mult = if me > 0 {
        // least-squares Aeqᵀ λ = −grad
        let aat = &qp.aeq * qp.aeq.transpose();
        let rhs = -(&qp.aeq * &grad);
        aat.clone().svd(true, true).solve(&rhs, 1e-14).unwrap_or_else(|_| Vector::zeros(me))
    } else {
        Vector::zeros(0)
    };
    let stat = &grad + qp.aeq.transpose() * &eq_mult;
    let scale = 1.0 + qp.f.amax() + qp.h.amax() * z.amax() + mult.amax() * qp.g.amax();
    let mut res = stat.amax() / scale;
    if m > 0 {
        let slack = &qp.gv - &qp.g * &z;
        for j in 0..m {
            res = res.max((-slack[j]).max(0.0));
            res = res.max((mult[j] * slack[j]).abs() / scale);
        }
    }
    if me > 0 {
        res = res.max((&qp.aeq * &z - &qp.beq).amax());
    }
    QpSolution {
        value: qp.objective(&z),
        z,
        active_set: act,
        multipliers: mult,
        eq_multipliers: eq_mult,
        iterations,
        kkt_residual: res,
    }
}

/// Closed-form minimizer ignoring inequalities.
pub fn unconstrained_min(qp: &Qp) -> Result<QpSolution, QpError> {
    let red = reduce(qp)?;
    let u = if red.h.nrows() == 0 {
        Vector::zeros(0)
    } else {
        let chol = Cholesky::new(red.h.clone()).ok_or(QpError::Degenerate)?;
        -chol.solve(&red.f)
    };
    let mut stripped = qp.clone();
    stripped.g = Mat::zeros(0, qp.dim());
    stripped.gv = Vector::zeros(0);
    Ok(finish(&stripped, &red, &u, &[], &[], 0))
}

pub fn solve(qp: &Qp) -> Result<QpSolution, QpError> {
    solve_warm(qp, &[])
}

/// Solve starting from a guessed active set; falls back to a cold start when the
/// guess is not dual feasible.
pub fn solve_warm(qp: &Qp, warm: &[usize]) -> Result<QpSolution, QpError> {
    let red = reduce(qp)?;
    let nr = red.h.nrows();
    let m = red.g.nrows();
    let max_iter = 50 * (m + 1);
    if nr == 0 {
        let u = Vector::zeros(0);
        for j in 0..m {
            if red.gv[j] < -FEAS_TOL {
                return Err(QpError::Infeasible);
            }
        }
        return Ok(finish(qp, &red, &u, &[], &[], 0));
    }
    let chol = Cholesky::new(red.h.clone()).ok_or(QpError::Degenerate)?;
    let hinv = symmetrize(&chol.inverse());
    let cold = -&hinv * &red.f;

    let mut x = cold.clone();
    let mut act: Vec<usize> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();
    if !warm.is_empty() {
        if let Some((xw, lw)) = warm_point(&red, &hinv, warm) {
            x = xw;
            act = warm.to_vec();
            lam = lw;
        }
    }

    // Constraint j in GI orientation: n_jᵀ x ≥ b_j with n_j = −G_jᵀ, b_j = −g_j.
    let normal = |j: usize| -> Vector { -red.g.row(j).transpose() };
    let slack = |x: &Vector, j: usize| -> f64 { red.gv[j] - red.g.row(j).dot(&x.transpose()) };

    let mut iters = 0usize;
    loop {
        // choose most violated constraint, lowest id on ties
        let mut p = None;
        let mut worst = -FEAS_TOL;
        for j in 0..m {
            if act.contains(&j) {
                continue;
            }
            let s = slack(&x, j);
            if s < worst {
                worst = s;
                p = Some(j);
            }
        }
        let Some(p) = p else {
            let u = x;
            return Ok(finish(qp, &red, &u, &act, &lam, iters));
        };
        let np = normal(p);
        let mut lam_p = 0.0;
        loop {
            iters += 1;
            if iters > max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }
            let q = act.len();
            let hn = &hinv * &np;
            let (dz, r) = if q == 0 {
                (hn.clone(), Vector::zeros(0))
            } else {
                let mut nmat = Mat::zeros(nr, q);
                for (c, &a) in act.iter().enumerate() {
                    nmat.set_column(c, &normal(a));
                }
                let b = nmat.transpose() * &hinv * &nmat;
                let rhs = nmat.transpose() * &hn;
                let r = match Cholesky::new(symmetrize(&b)) {
                    Some(ch) => ch.solve(&rhs),
                    None => b.clone().lu().solve(&rhs).ok_or(QpError::Degenerate)?,
                };
                (&hn - &hinv * (&nmat * &r), r)
            };
            // partial step: the active constraint whose multiplier hits zero first
            let mut t1 = f64::INFINITY;
            let mut drop_k = None;
            for k in 0..q {
                if r[k] > 1e-14 {
                    let ratio = lam[k] / r[k];
                    if ratio < t1 || (ratio == t1 && drop_k.is_some_and(|d: usize| act[k] < act[d])) {
                        t1 = ratio;
                        drop_k = Some(k);
                    }
                }
            }
            let curv = dz.dot(&np);
            let scale = np.norm_squared() * hinv.amax().max(1e-300);
            let t2 = if curv > 1e-13 * scale { -slack(&x, p) / curv } else { f64::INFINITY };
            if !t1.is_finite() && !t2.is_finite() {
                return Err(QpError::Infeasible);
            }
            if !t2.is_finite() {
                for k in 0..q {
                    lam[k] -= t1 * r[k];
                }
                lam_p += t1;
                let k = drop_k.expect("finite t1 has a blocking constraint");
                act.remove(k);
                lam.remove(k);
                continue;
            }
            let t = t1.min(t2);
            x += &dz * t;
            for k in 0..q {
                lam[k] -= t * r[k];
            }
            lam_p += t;
            if t2 <= t1 {
                act.push(p);
                lam.push(lam_p);
                break;
            }
            let k = drop_k.expect("t1 < t2 implies a blocking constraint");
            act.remove(k);
            lam.remove(k);
        }
    }
}

fn warm_point(red: &Reduced, hinv: &Mat, warm: &[usize]) -> Option<(Vector, Vec<f64>)> {
    let nr = red.h.nrows();
    let m = red.g.nrows();
    if warm.iter().any(|&j| j >= m) || warm.len() > nr {
        return None;
    }
    let q = warm.len();
    let mut ga = Mat::zeros(q, nr);
    let mut gva = Vector::zeros(q);
    for (r, &j) in warm.iter().enumerate() {
        ga.set_row(r, &red.g.row(j));
        gva[r] = red.gv[j];
    }
    let s = &ga * hinv * ga.transpose();
    let ch = Cholesky::new(symmetrize(&s))?;
    let lam = -ch.solve(&(&gva + &ga * hinv * &red.f));
    if lam.iter().any(|&l| l < 0.0) {
        return None;
    }
    let x = -hinv * (&red.f + ga.transpose() * &lam);
    Some((x, lam.iter().copied().collect()))
}
