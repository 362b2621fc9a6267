//! Quadratic completion identities behind the arrival-cost recursions.

use crate::matops::{kalman_gain, rank, riccati_plus, riccati_r, LinalgError, Mat, SpdMat, Vector};

#[derive(Clone, Debug)]
pub struct Smoothed {
    pub x: Vector,
    pub h: SpdMat,
    pub value: f64,
}

/// V(x) = ½‖x − x̂‖²_{P⁻¹} + ½‖y − Cx‖²_{R⁻¹} = ½‖x − x*‖²_{H⁻¹} + V(x*).
pub fn smoothing_update(xhat: &Vector, p: &SpdMat, c: &Mat, r: &SpdMat, y: &Vector) -> Result<Smoothed, LinalgError> {
    let k = kalman_gain(p, c, r)?;
    let x = xhat + &k * (y - c * xhat);
    let h = riccati_r(p, c, r)?;
    let value = smoothing_cost(xhat, p, c, r, y, &x);
    Ok(Smoothed { x, h, value })
}

pub fn smoothing_cost(xhat: &Vector, p: &SpdMat, c: &Mat, r: &SpdMat, y: &Vector, x: &Vector) -> f64 {
    0.5 * p.inv_quad(&(x - xhat)) + 0.5 * r.inv_quad(&(y - c * x))
}

#[derive(Clone, Debug)]
pub struct PartialUpdate {
    pub x0: Vector,
    pub p1: SpdMat,
    pub value: f64,
}

/// min over x(0) of ½‖x(0) − x̂(0)‖²_{P⁻¹} + ½‖x̂(1) − A x(0)‖²_{Q⁻¹}.
pub fn partial_update(
    xhat0: &Vector,
    p0: &SpdMat,
    a: &Mat,
    q: &SpdMat,
    xhat1: &Vector,
) -> Result<PartialUpdate, LinalgError> {
    let p1 = riccati_plus(p0, a, q)?;
    let k = kalman_gain(p0, a, q)?;
    let innov = xhat1 - a * xhat0;
    let x0 = xhat0 + &k * &innov;
    let value = 0.5 * p1.inv_quad(&innov);
    Ok(PartialUpdate { x0, p1, value })
}

/// ½‖Cx − ξ‖²_{W⁻¹} = ½‖x − x̂‖²_{CᵀW⁻¹C} for full column rank C; returns (x̂, CᵀW⁻¹C).
pub fn centering(c: &Mat, w: &SpdMat, xi: &Vector) -> Result<(Vector, SpdMat), LinalgError> {
    if rank(c) < c.ncols() {
        return Err(LinalgError::NotPositiveDefinite { op: "centering" });
    }
    let g = SpdMat::new(c.transpose() * w.solve(c))?;
    let xhat = g.solve_vec(&(c.transpose() * w.solve_vec(xi)));
    Ok((xhat, g))
}

/// ϑ(z) = ‖z − ξ‖²_Q + d
pub fn theta_quad(q: &Mat, xi: &Vector, d: f64, z: &Vector) -> f64 {
    let e = z - xi;
    e.dot(&(q * &e)) + d
}

/// ϑ(z̄) − [ϑ(ẑ) + ϑ(Δz + ξ) − d]; nonnegative when ẑ, z̄ are optima over Ω ⊇ Γ.
pub fn bound_margin(q: &Mat, xi: &Vector, d: f64, zhat: &Vector, zbar: &Vector) -> f64 {
    let dz = zbar - zhat;
    theta_quad(q, xi, d, zbar) - (theta_quad(q, xi, d, zhat) + theta_quad(q, xi, d, &(dz + xi)) - d)
}
