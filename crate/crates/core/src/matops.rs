//! Dense linear algebra: Riccati-type operators, PSD tests, spectral quantities,
//! block assembly. Backed by nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub const SYM_TOL: f64 = 1e-9;
pub const EIG_TOL: f64 = 1e-8;
const JITTER_LADDER: [f64; 3] = [1e-12, 1e-10, 1e-8];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("matrix is not positive definite ({op})")]
    NotPositiveDefinite { op: &'static str },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("eigenvalue computation failed")]
    EigenFailure,
    #[error("non-finite entry in {op}")]
    NonFinite { op: &'static str },
}

fn mismatch(op: &'static str, detail: String) -> LinalgError {
    LinalgError::DimensionMismatch { op, detail }
}

/// Average a square matrix with its transpose.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Symmetric positive definite matrix with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct SpdMat {
    mat: Mat,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMat {
    pub fn new(m: Mat) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { op: "SpdMat::new" });
        }
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > SYM_TOL * scale {
            return Err(LinalgError::NotPositiveDefinite { op: "SpdMat::new (asymmetric)" });
        }
        let mat = symmetrize(&m);
        let chol = factor_with_jitter(&mat).ok_or(LinalgError::NotPositiveDefinite { op: "SpdMat::new" })?;
        Ok(SpdMat { mat, chol })
    }

    pub fn identity(n: usize) -> Self {
        SpdMat::new(Mat::identity(n, n)).expect("identity is SPD")
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self, LinalgError> {
        SpdMat::new(Mat::from_diagonal(&Vector::from_column_slice(d)))
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn into_mat(self) -> Mat {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn inverse(&self) -> Mat {
        symmetrize(&self.chol.inverse())
    }

    pub fn solve(&self, b: &Mat) -> Mat {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    /// xᵀ M⁻¹ x
    pub fn inv_quad(&self, x: &Vector) -> f64 {
        x.dot(&self.chol.solve(x))
    }

    pub fn scale(&self, s: f64) -> Result<Self, LinalgError> {
        SpdMat::new(&self.mat * s)
    }

    pub fn norm2(&self) -> f64 {
        max_eigenvalue_sym(&self.mat)
    }
}

fn factor_with_jitter(m: &Mat) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let n = m.nrows().max(1) as f64;
    let tr = m.trace().abs().max(f64::MIN_POSITIVE);
    for j in JITTER_LADDER {
        let mut mj = m.clone();
        for d in 0..m.nrows() {
            mj[(d, d)] += j * tr / n;
        }
        if let Some(c) = Cholesky::new(mj) {
            return Some(c);
        }
    }
    None
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &Mat) -> Result<Mat, LinalgError> {
    Ok(SpdMat::new(m.clone())?.inverse())
}

fn check_cpr(p: &SpdMat, c: &Mat, r: &SpdMat, op: &'static str) -> Result<(), LinalgError> {
    if c.ncols() != p.dim() || c.nrows() != r.dim() {
        return Err(mismatch(
            op,
            format!("P {}x{}, C {}x{}, R {}x{}", p.dim(), p.dim(), c.nrows(), c.ncols(), r.dim(), r.dim()),
        ));
    }
    Ok(())
}

/// R(P, C, R) = P − P Cᵀ (C P Cᵀ + R)⁻¹ C P.
pub fn riccati_r(p: &SpdMat, c: &Mat, r: &SpdMat) -> Result<SpdMat, LinalgError> {
    check_cpr(p, c, r, "riccati_r")?;
    if c.nrows() == 0 {
        return Ok(p.clone());
    }
    let pm = p.mat();
    let s = SpdMat::new(c * pm * c.transpose() + r.mat())?;
    let cp = c * pm;
    let out = pm - cp.transpose() * s.solve(&cp);
    SpdMat::new(symmetrize(&out))
}

/// R(P, C, R) through the information form (P⁻¹ + Cᵀ R⁻¹ C)⁻¹.
pub fn riccati_r_info(p: &SpdMat, c: &Mat, r: &SpdMat) -> Result<SpdMat, LinalgError> {
    check_cpr(p, c, r, "riccati_r_info")?;
    let info = p.inverse() + c.transpose() * r.solve(c);
    SpdMat::new(spd_inverse(&symmetrize(&info))?)
}

/// R⁺(P, A, Q) = A P Aᵀ + Q.
pub fn riccati_plus(p: &SpdMat, a: &Mat, q: &SpdMat) -> Result<SpdMat, LinalgError> {
    if a.ncols() != p.dim() || a.nrows() != q.dim() {
        return Err(mismatch(
            "riccati_plus",
            format!("P {}, A {}x{}, Q {}", p.dim(), a.nrows(), a.ncols(), q.dim()),
        ));
    }
    SpdMat::new(symmetrize(&(a * p.mat() * a.transpose() + q.mat())))
}

/// K(P, C, R) = P Cᵀ (C P Cᵀ + R)⁻¹.
pub fn kalman_gain(p: &SpdMat, c: &Mat, r: &SpdMat) -> Result<Mat, LinalgError> {
    check_cpr(p, c, r, "kalman_gain")?;
    if c.nrows() == 0 {
        return Ok(Mat::zeros(p.dim(), 0));
    }
    let pm = p.mat();
    let s = SpdMat::new(c * pm * c.transpose() + r.mat())?;
    // K = P Cᵀ S⁻¹ = (S⁻¹ C P)ᵀ
    Ok(s.solve(&(c * pm)).transpose())
}

/// K(P, C, R) through (P⁻¹ + Cᵀ R⁻¹ C)⁻¹ Cᵀ R⁻¹.
pub fn kalman_gain_info(p: &SpdMat, c: &Mat, r: &SpdMat) -> Result<Mat, LinalgError> {
    let h = riccati_r_info(p, c, r)?;
    Ok(h.mat() * r.solve(c).transpose())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let e = SymmetricEigen::new(symmetrize(m));
    let mut v: Vec<f64> = e.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub fn min_eigenvalue_sym(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue_sym(m: &Mat) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

fn is_symmetric(m: &Mat) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= SYM_TOL * m.amax().max(1.0)
}

/// max |λ(M)|.
pub fn spectral_radius(m: &Mat) -> Result<f64, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::EigenFailure);
    }
    if is_symmetric(m) {
        let ev = sym_eigenvalues(m);
        return Ok(ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    // QR iterations can stall on ±λ structure; eig(m + sI) = eig(m) + s breaks it.
    for shift in [0.0, 0.318_309_886, -0.577_215_665, 1.414_213_562] {
        let s = shift * scale;
        let shifted = m + Mat::identity(m.nrows(), m.ncols()) * s;
        if let Some(schur) = shifted.try_schur(f64::EPSILON, 10_000) {
            let ev = schur.complex_eigenvalues();
            return Ok(ev.iter().fold(0.0_f64, |acc, z| acc.max((z - s).norm())));
        }
    }
    Err(LinalgError::EigenFailure)
}

/// (σ_min, σ_max); σ_min is taken over min(rows, cols) singular values.
pub fn singular_extremes(m: &Mat) -> Result<(f64, f64), LinalgError> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok((0.0, 0.0));
    }
    let svd = m.clone().try_svd(false, false, f64::EPSILON, 10_000).ok_or(LinalgError::EigenFailure)?;
    let s = &svd.singular_values;
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(0.0, f64::max);
    Ok((lo, hi))
}

/// Spectral norm ‖M‖₂.
pub fn norm2(m: &Mat) -> f64 {
    singular_extremes(m).map(|(_, hi)| hi).unwrap_or(f64::NAN)
}

pub fn block_diag(blocks: &[Mat]) -> Mat {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let (mut ro, mut co) = (0, 0);
    for b in blocks {
        out.view_mut((ro, co), (b.nrows(), b.ncols())).copy_from(b);
        ro += b.nrows();
        co += b.ncols();
    }
    out
}

/// I_n ⊗ M
pub fn kron_identity(n: usize, m: &Mat) -> Mat {
    block_diag(&vec![m.clone(); n])
}

/// Vertical stack of matrices with equal column counts.
pub fn vstack(blocks: &[Mat], cols: usize) -> Mat {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(r, cols);
    let mut ro = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((ro, 0), (b.nrows(), cols)).copy_from(b);
        ro += b.nrows();
    }
    out
}

/// Lhs ≼ Rhs up to tol: λ_min(Rhs − Lhs) ≥ −tol.
pub fn psd_leq(lhs: &Mat, rhs: &Mat, tol: f64) -> Result<bool, LinalgError> {
    if lhs.shape() != rhs.shape() || !lhs.is_square() {
        return Err(mismatch("psd_leq", format!("{:?} vs {:?}", lhs.shape(), rhs.shape())));
    }
    Ok(min_eigenvalue_sym(&(rhs - lhs)) >= -tol)
}

/// M^k for square M.
pub fn mat_pow(m: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Numerical rank via singular values with relative tolerance.
pub fn rank(m: &Mat) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = smax * 1e-10 * (m.nrows().max(m.ncols()) as f64);
    svd.singular_values.iter().filter(|&&s| s > tol && s > 1e-300).count()
}
