//! Local window problem MHE-i in condensed form.
//!
//! States are parametrized by the window's first state and the process-noise
//! sequence: x_j = S_j z + s_j, with s_j collecting the crosstalk inputs.
//! Output residuals v_j = y_j − C x_j − C̃ x̃_j are eliminated analytically.

use super::EstimatorError;
use crate::matops::{symmetrize, Mat, SpdMat, Vector};
use crate::model::PartitionedSystem;
use crate::qpsolve::{self, Qp};

#[derive(Clone, Debug)]
pub enum PriorWeight {
    /// Π_{t−N/t−1}; penalty ½‖x − x̄‖²_{Π⁻¹}
    Cov(SpdMat),
    /// penalty (μ/2)‖x − x̄‖²
    Mu(f64),
}

/// Everything subsystem i needs to pose its window problem at time t.
#[derive(Clone, Debug)]
pub struct WindowData {
    pub prior: Vector,
    pub prior_weight: PriorWeight,
    /// y^{[i]}_{t−N..t−1}
    pub y: Vec<Vector>,
    /// x̃_{k/t−1}, k = t−N..t−1 (full state)
    pub crosstalk: Vec<Vector>,
    /// Stage weights Q_{k/t−1}; empty when the noise is fixed to zero.
    pub q: Vec<SpdMat>,
    /// Stage weights R_{k/t−1}; empty means identity.
    pub r: Vec<SpdMat>,
    pub theta_prev: f64,
}

#[derive(Clone, Debug)]
pub struct MheProblem {
    pub qp: Qp,
    /// x_j = S_j z + s_j, j = 0..N
    pub s_mats: Vec<Mat>,
    pub s_vecs: Vec<Vector>,
    /// d_j = y_j − C s_j − C̃ x̃_j
    pub d: Vec<Vector>,
    pub ni: usize,
    pub horizon: usize,
    pub with_noise: bool,
    c: Mat,
    data: WindowData,
}

#[derive(Clone, Debug)]
pub struct WindowSolution {
    /// x̂_{k/t}, k = t−N..t
    pub states: Vec<Vector>,
    pub z: Vector,
    /// Θ*_t
    pub value: f64,
    /// Σ L at the optimum
    pub stage_cost: f64,
    pub iterations: usize,
    pub active_set: Vec<usize>,
}

fn noise_block(ni: usize, horizon: usize, j: usize) -> Mat {
    let mut e = Mat::zeros(ni, ni * (horizon + 1));
    e.view_mut((0, ni * (j + 1)), (ni, ni)).fill_with_identity();
    e
}

/// Build the condensed QP of subsystem `i` for scheme `r` (1, 2 or 3).
/// State constraints are imposed for r = 1, 2 on every window state.
pub fn assemble_mhe(
    sys: &PartitionedSystem,
    i: usize,
    r: u8,
    data: WindowData,
) -> Result<MheProblem, EstimatorError> {
    let sub = &sys.subsystems[i];
    let ni = sub.n();
    let horizon = data.y.len();
    let mismatch = |m: &str| Err(EstimatorError::SchemePolicyMismatch(m.to_string()));
    if data.crosstalk.len() != horizon {
        return mismatch("crosstalk length differs from the window length");
    }
    let with_noise = match (r, &data.prior_weight) {
        (1 | 2, PriorWeight::Cov(_)) => true,
        (3, PriorWeight::Mu(mu)) if *mu >= 0.0 => false,
        _ => return mismatch(&format!("scheme {r} with incompatible prior weight")),
    };
    if with_noise && (data.q.len() != horizon || data.r.len() != horizon) {
        return mismatch("stage weights must cover the window");
    }
    if !with_noise && !data.q.is_empty() {
        return mismatch("PMHE3 fixes the process noise to zero");
    }
    let nz = if with_noise { ni * (horizon + 1) } else { ni };

    let mut s_mats = Vec::with_capacity(horizon + 1);
    let mut s_vecs = Vec::with_capacity(horizon + 1);
    let mut s0 = Mat::zeros(ni, nz);
    s0.view_mut((0, 0), (ni, ni)).fill_with_identity();
    s_mats.push(s0);
    s_vecs.push(Vector::zeros(ni));
    for j in 0..horizon {
        let mut next = &sub.a * &s_mats[j];
        if with_noise {
            next += noise_block(ni, horizon, j);
        }
        let nv = &sub.a * &s_vecs[j] + &sub.a_tilde * &data.crosstalk[j];
        s_mats.push(next);
        s_vecs.push(nv);
    }

    let mut h = Mat::zeros(nz, nz);
    let mut f = Vector::zeros(nz);
    let mut c0 = data.theta_prev;
    let mut d = Vec::with_capacity(horizon);
    for j in 0..horizon {
        let cs = &sub.c * &s_mats[j];
        let dj = &data.y[j] - &sub.c * &s_vecs[j] - &sub.c_tilde * &data.crosstalk[j];
        let (rcs, rd) = match data.r.get(j) {
            Some(rj) if with_noise => (rj.solve(&cs), rj.solve_vec(&dj)),
            _ => (cs.clone(), dj.clone()),
        };
        h += cs.transpose() * &rcs;
        f -= cs.transpose() * &rd;
        c0 += 0.5 * dj.dot(&rd);
        d.push(dj);
    }
    if with_noise {
        for j in 0..horizon {
            let qinv = data.q[j].inverse();
            let o = ni * (j + 1);
            let mut blk = h.view_mut((o, o), (ni, ni));
            blk += &qinv;
        }
    }
    match &data.prior_weight {
        PriorWeight::Cov(p) => {
            let pinv = p.inverse();
            let mut blk = h.view_mut((0, 0), (ni, ni));
            blk += &pinv;
            let g = &pinv * &data.prior;
            let mut fr = f.rows_mut(0, ni);
            fr -= &g;
            c0 += 0.5 * data.prior.dot(&g);
        }
        PriorWeight::Mu(mu) => {
            for k in 0..ni {
                h[(k, k)] += mu;
            }
            let mut fr = f.rows_mut(0, ni);
            fr -= &data.prior * *mu;
            c0 += 0.5 * mu * data.prior.norm_squared();
        }
    }
    let mut qp = Qp::new(symmetrize(&h), f, c0);
    if with_noise && !sub.constraint.is_unbounded() {
        let (g, gv) = sub.constraint.halfspaces(ni);
        if g.nrows() > 0 {
            for j in 0..=horizon {
                qp.push_ineq(&(&g * &s_mats[j]), &(&gv - &g * &s_vecs[j]));
            }
        }
    }
    Ok(MheProblem { qp, s_mats, s_vecs, d, ni, horizon, with_noise, c: sub.c.clone(), data })
}

impl MheProblem {
    pub fn data(&self) -> &WindowData {
        &self.data
    }

    pub fn states(&self, z: &Vector) -> Vec<Vector> {
        self.s_mats.iter().zip(&self.s_vecs).map(|(s, v)| s * z + v).collect()
    }

    /// ŵ_j (zero for PMHE3).
    pub fn noise(&self, z: &Vector) -> Vec<Vector> {
        (0..self.horizon)
            .map(|j| if self.with_noise { z.rows(self.ni * (j + 1), self.ni).into_owned() } else { Vector::zeros(self.ni) })
            .collect()
    }

    /// v̂_j
    pub fn residuals(&self, z: &Vector) -> Vec<Vector> {
        (0..self.horizon).map(|j| &self.d[j] - &self.c * (&self.s_mats[j] * z)).collect()
    }

    /// Σ_j L(ŵ_j, v̂_j)
    pub fn stage_cost(&self, z: &Vector) -> f64 {
        let w = self.noise(z);
        let v = self.residuals(z);
        let mut s = 0.0;
        for j in 0..self.horizon {
            if self.with_noise {
                s += 0.5 * self.data.q[j].inv_quad(&w[j]) + 0.5 * self.data.r[j].inv_quad(&v[j]);
            } else {
                s += 0.5 * v[j].norm_squared();
            }
        }
        s
    }

    /// Initial penalty without the Θ*_{t−1} constant.
    pub fn initial_penalty(&self, x0: &Vector) -> f64 {
        let e = x0 - &self.data.prior;
        match &self.data.prior_weight {
            PriorWeight::Cov(p) => 0.5 * p.inv_quad(&e),
            PriorWeight::Mu(mu) => 0.5 * mu * e.norm_squared(),
        }
    }

    /// Decision vector reproducing a given state sequence x_0..x_N; for PMHE3
    /// only x_0 is used.
    pub fn decision_from_states(&self, sys: &PartitionedSystem, i: usize, states: &[Vector]) -> Vector {
        let sub = &sys.subsystems[i];
        let ni = self.ni;
        let mut z = Vector::zeros(self.qp.dim());
        z.rows_mut(0, ni).copy_from(&states[0]);
        if self.with_noise {
            for j in 0..self.horizon {
                let w = &states[j + 1] - &sub.a * &states[j] - &sub.a_tilde * &self.data.crosstalk[j];
                z.rows_mut(ni * (j + 1), ni).copy_from(&w);
            }
        }
        z
    }

    pub fn solve(&self, subsystem: usize, warm: &[usize]) -> Result<WindowSolution, EstimatorError> {
        let sol = if self.qp.n_ineq() == 0 {
            qpsolve::unconstrained_min(&self.qp)
        } else {
            qpsolve::solve_warm(&self.qp, warm)
        }
        .map_err(|source| EstimatorError::Qp { subsystem, source })?;
        Ok(WindowSolution {
            states: self.states(&sol.z),
            stage_cost: self.stage_cost(&sol.z),
            value: sol.value,
            iterations: sol.iterations,
            active_set: sol.active_set,
            z: sol.z,
        })
    }
}
