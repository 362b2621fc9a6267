//! Initial-penalty covariance updates and their matrix-inequality checks.

use super::EstimatorError;
use crate::config::Choice;
use crate::matops::{
    block_diag, kron_identity, min_eigenvalue_sym, norm2, psd_leq, riccati_plus, riccati_r, spd_inverse, symmetrize,
    Mat, SpdMat,
};
use crate::model::{extended_observability, powers, PartitionedSystem, Subsystem};

/// Verification tolerance, relative to max(1, ‖W‖).
pub const LMI_TOL: f64 = 1e-9;
pub const ALPHA_MAX: f64 = 1e6;
/// ‖Π‖ > UNBOUNDED_FACTOR·‖Π0‖ is reported as unbounded growth.
pub const UNBOUNDED_FACTOR: f64 = 1e6;
const BISECTIONS: usize = 40;

#[derive(Clone, Debug)]
pub struct TestReport {
    pub subsystem: usize,
    pub horizon: usize,
    pub min_eig: f64,
    pub passed: bool,
    pub m: Mat,
}

#[derive(Clone, Debug)]
pub struct CovUpdate {
    /// PMHE1-I: Π_{k/t}, k = t−N+1..t; otherwise the single Π_{t−N+1/t}.
    pub pis: Vec<SpdMat>,
    pub alpha: f64,
    /// min eig(W − P) of the accepted update.
    pub gap: f64,
    /// PMHE2-II only: no admissible scaling existed.
    pub violated: bool,
}

/// Π* = R⁺(R(Π, C, R), A, Q)
pub fn pi_star(pi: &SpdMat, sub: &Subsystem, q: &SpdMat, r: &SpdMat) -> Result<SpdMat, EstimatorError> {
    Ok(riccati_plus(&riccati_r(pi, &sub.c, r)?, &sub.a, q)?)
}

/// (C1, C2, C3) stacks for a window of N states.
pub fn c_stacks(sub: &Subsystem, horizon: usize) -> (Mat, Mat, Mat) {
    let (n, p) = (sub.n(), sub.p());
    let cols = n * horizon;
    let mut c1 = Mat::zeros(n, cols);
    c1.view_mut((0, 0), (n, n)).fill_with_identity();
    let rows = horizon - 1;
    let mut c2 = Mat::zeros(n * rows, cols);
    let mut c3 = Mat::zeros(p * rows, cols);
    for k in 0..rows {
        c2.view_mut((n * k, n * k), (n, n)).copy_from(&(-&sub.a));
        c2.view_mut((n * k, n * (k + 1)), (n, n)).fill_with_identity();
        c3.view_mut((p * k, n * k), (p, n)).copy_from(&sub.c);
    }
    (c1, c2, c3)
}

fn window_tail(w: &[SpdMat]) -> Vec<Mat> {
    w.iter().skip(1).map(|m| m.mat().clone()).collect()
}

/// W₁ = C4ᵀ diag(Π*, Q_{N−1}, R_{N−1})⁻¹ C4, with stage weights at offsets 1..N−1.
pub fn pmhe1_w(sub: &Subsystem, pi_star: &SpdMat, q_win: &[SpdMat], r_win: &[SpdMat]) -> Result<Mat, EstimatorError> {
    let horizon = q_win.len();
    let (c1, c2, c3) = c_stacks(sub, horizon);
    let mut w = c1.transpose() * pi_star.solve(&c1);
    if horizon > 1 {
        let qn = SpdMat::new(block_diag(&window_tail(q_win)))?;
        let rn = SpdMat::new(block_diag(&window_tail(r_win)))?;
        w += c2.transpose() * qn.solve(&c2) + c3.transpose() * rn.solve(&c3);
    }
    Ok(symmetrize(&w))
}

/// C_{i,1} = Σ_j (m_x^{[j]} A_jiᵀ Q_j⁻¹ A_ji + m_y^{[j]} C_jiᵀ R_j⁻¹ C_ji)
pub fn c_i1(sys: &PartitionedSystem, i: usize) -> Mat {
    let ni = sys.subsystems[i].n();
    let g = &sys.graph;
    let mut out = Mat::zeros(ni, ni);
    for (j, sj) in sys.subsystems.iter().enumerate() {
        if j == i {
            continue;
        }
        if g.a_nz[j][i] {
            let aji = sys.a_block(j, i);
            out += aji.transpose() * sj.q.solve(&aji) * g.m_x[j] as f64;
        }
        if g.c_nz[j][i] {
            let cji = sys.c_tilde_block(j, i);
            out += cji.transpose() * sj.r.solve(&cji) * g.m_y[j] as f64;
        }
    }
    symmetrize(&out)
}

/// Case I: diag(3Π_0⁻¹, 2Π_1⁻¹, …, 2Π_{N−1}⁻¹)
pub fn pmhe1_p_case1(pis: &[SpdMat]) -> Mat {
    let blocks: Vec<Mat> =
        pis.iter().enumerate().map(|(k, p)| p.inverse() * if k == 0 { 3.0 } else { 2.0 }).collect();
    block_diag(&blocks)
}

/// Case II: diag(Π⁻¹ + C_{i,1}, C_{i,1}, …, C_{i,1})
pub fn pmhe1_p_case2(pi: &SpdMat, ci1: &Mat, horizon: usize) -> Mat {
    let mut p = kron_identity(horizon, ci1);
    let n = pi.dim();
    let mut blk = p.view_mut((0, 0), (n, n));
    blk += pi.inverse();
    p
}

/// Sufficient condition M_{i,1} ⪰ 0 for the nominal-weight update.
pub fn pmhe1_offline_test(sys: &PartitionedSystem, i: usize, horizon: usize) -> Result<TestReport, EstimatorError> {
    sys.check_horizon(horizon)?;
    let sub = &sys.subsystems[i];
    let (_, c2, c3) = c_stacks(sub, horizon);
    let mut m = -kron_identity(horizon, &c_i1(sys, i));
    if horizon > 1 {
        let qn = SpdMat::new(kron_identity(horizon - 1, sub.q.mat()))?;
        let rn = SpdMat::new(kron_identity(horizon - 1, sub.r.mat()))?;
        m += c2.transpose() * qn.solve(&c2) + c3.transpose() * rn.solve(&c3);
    }
    let m = symmetrize(&m);
    let min_eig = min_eigenvalue_sym(&m);
    let tol = LMI_TOL * norm2(&m).max(1.0);
    Ok(TestReport { subsystem: i, horizon, min_eig, passed: min_eig >= -tol, m })
}

fn verify_tol(w: &Mat) -> f64 {
    LMI_TOL * norm2(w).max(1.0)
}

/// Smallest α ∈ [1, ALPHA_MAX] with p_of(α) ⪯ W (log-space bisection).
fn scale_search(p_of: impl Fn(f64) -> Mat, w: &Mat) -> Result<Option<f64>, EstimatorError> {
    if psd_leq(&p_of(1.0), w, 0.0)? {
        return Ok(Some(1.0));
    }
    if !psd_leq(&p_of(ALPHA_MAX), w, 0.0)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0f64, ALPHA_MAX.ln());
    for _ in 0..BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if psd_leq(&p_of(mid.exp()), w, 0.0)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi.exp()))
}

fn check_bounded(sub_idx: usize, sub: &Subsystem, t: usize, pis: &[SpdMat]) -> Result<(), EstimatorError> {
    let bound = UNBOUNDED_FACTOR * sub.pi0.norm2();
    for p in pis {
        let norm = p.norm2();
        if !(norm <= bound) {
            return Err(EstimatorError::UnboundedCovariance { subsystem: sub_idx, t, norm });
        }
    }
    Ok(())
}

/// PMHE1 update at time t.
///
/// `pis`: choice I, Π_{k/t−1} for k = t−N..t−1; choice II, [Π_{t−N/t−1}].
/// `q_win`/`r_win`: stage weights used by the window at t.
/// `ci1`: required for choice II.
#[allow(clippy::too_many_arguments)]
pub fn pmhe1_cov_update(
    sys: &PartitionedSystem,
    i: usize,
    choice: Choice,
    t: usize,
    pis: &[SpdMat],
    q_win: &[SpdMat],
    r_win: &[SpdMat],
    ci1: Option<&Mat>,
) -> Result<CovUpdate, EstimatorError> {
    let sub = &sys.subsystems[i];
    let horizon = q_win.len();
    let star = pi_star(&pis[0], sub, &q_win[0], &r_win[0])?;
    let w = pmhe1_w(sub, &star, q_win, r_win)?;
    let tol = verify_tol(&w);
    let lmi_fail = |min_eig| EstimatorError::LmiInfeasibleAtStep { subsystem: i, t, min_eig };
    match choice {
        Choice::II => {
            let ci1 = ci1.ok_or_else(|| EstimatorError::SchemePolicyMismatch("choice II needs C_{i,1}".into()))?;
            let p = pmhe1_p_case2(&star, ci1, horizon);
            let gap = min_eigenvalue_sym(&symmetrize(&(&w - &p)));
            if gap < -tol {
                return Err(lmi_fail(gap));
            }
            check_bounded(i, sub, t, std::slice::from_ref(&star))?;
            Ok(CovUpdate { pis: vec![star], alpha: 1.0, gap, violated: false })
        }
        Choice::I => {
            let mut cand = vec![star];
            for j in 1..horizon {
                let next = pi_star(&cand[j - 1], sub, &q_win[j], &r_win[j])?;
                cand.push(next);
            }
            let p0 = pmhe1_p_case1(&cand);
            let alpha = scale_search(|a| &p0 / a, &w)?.ok_or_else(|| lmi_fail(min_eigenvalue_sym(&(&w - &p0 / ALPHA_MAX))))?;
            let gap = min_eigenvalue_sym(&symmetrize(&(&w - &p0 / alpha)));
            if gap < -tol {
                return Err(lmi_fail(gap));
            }
            let scaled = cand.iter().map(|c| c.scale(alpha)).collect::<Result<Vec<_>, _>>()?;
            check_bounded(i, sub, t, &scaled)?;
            Ok(CovUpdate { pis: scaled, alpha, gap, violated: false })
        }
    }
}

/// C_w: block (r, c) = C A^{r−1−c} for c < r, first block row zero; (N−1)p × (N−1)n.
pub fn c_w(sub: &Subsystem, horizon: usize) -> Mat {
    let (n, p) = (sub.n(), sub.p());
    let k = horizon.saturating_sub(1);
    let pw = powers(&sub.a, k);
    let mut out = Mat::zeros(p * k, n * k);
    for r in 0..k {
        for c in 0..r {
            out.view_mut((p * r, n * c), (p, n)).copy_from(&(&sub.c * &pw[r - 1 - c]));
        }
    }
    out
}

/// Π** = C_w Q_{N−1} C_wᵀ + R_{N−1}
pub fn pmhe2_pi_star_star(sub: &Subsystem, q_win: &[SpdMat], r_win: &[SpdMat]) -> Result<SpdMat, EstimatorError> {
    let horizon = q_win.len();
    let cw = c_w(sub, horizon);
    let qn = block_diag(&window_tail(q_win));
    let rn = block_diag(&window_tail(r_win));
    Ok(SpdMat::new(symmetrize(&(&cw * qn * cw.transpose() + rn)))?)
}

/// W₂ = R(Π*, O_{N−1}, Π**)⁻¹ = Π*⁻¹ + O_{N−1}ᵀ Π**⁻¹ O_{N−1}
pub fn pmhe2_w(sub: &Subsystem, pi_star: &SpdMat, q_win: &[SpdMat], r_win: &[SpdMat]) -> Result<Mat, EstimatorError> {
    let horizon = q_win.len();
    let mut w = pi_star.inverse();
    if horizon > 1 {
        let o = extended_observability(&sub.a, &sub.c, horizon - 1)?;
        let pss = pmhe2_pi_star_star(sub, q_win, r_win)?;
        w += o.transpose() * pss.solve(&o);
    }
    Ok(symmetrize(&w))
}

/// Scalar ω with Ω_i = ω I: Σ_{k<N} ‖A^k‖² · ‖C̃ᵀ R⁻¹ C̃ + Ãᵀ Q⁻¹ Ã‖.
pub fn omega_scalar(sys: &PartitionedSystem, horizon: usize) -> Result<f64, EstimatorError> {
    let qinv = spd_inverse(&sys.q_blockdiag())?;
    let rinv = spd_inverse(&sys.r_blockdiag())?;
    let gram = sys.c_tilde.transpose() * rinv * &sys.c_tilde + sys.a_tilde.transpose() * qinv * &sys.a_tilde;
    let g = norm2(&symmetrize(&gram));
    Ok(powers(&sys.a, horizon.saturating_sub(1)).iter().map(|p| norm2(p).powi(2)).sum::<f64>() * g)
}

/// P₂ for a candidate Π: case I (2N+1)Π⁻¹, case II ωI + Π⁻¹.
pub fn pmhe2_p(choice: Choice, pi: &SpdMat, omega: f64, horizon: usize) -> Mat {
    let inv = pi.inverse();
    match choice {
        Choice::I => inv * (2 * horizon + 1) as f64,
        Choice::II => inv + Mat::identity(pi.dim(), pi.dim()) * omega,
    }
}

/// PMHE2 update Π_{t−N+1/t} = α Π*, α minimal with P₂ ⪯ W₂. In case II an
/// infeasible step is reported through `violated` and α = 1 is kept.
#[allow(clippy::too_many_arguments)]
pub fn pmhe2_cov_update(
    sys: &PartitionedSystem,
    i: usize,
    choice: Choice,
    t: usize,
    pi: &SpdMat,
    q_win: &[SpdMat],
    r_win: &[SpdMat],
    omega: f64,
) -> Result<CovUpdate, EstimatorError> {
    let sub = &sys.subsystems[i];
    let horizon = q_win.len();
    let star = pi_star(pi, sub, &q_win[0], &r_win[0])?;
    let w = pmhe2_w(sub, &star, q_win, r_win)?;
    let tol = verify_tol(&w);
    let star_inv = star.inverse();
    let p_of = |a: f64| match choice {
        Choice::I => &star_inv * ((2 * horizon + 1) as f64 / a),
        Choice::II => &star_inv / a + Mat::identity(sub.n(), sub.n()) * omega,
    };
    let found = scale_search(p_of, &w)?;
    let (alpha, violated) = match (found, choice) {
        (Some(a), _) => (a, false),
        (None, Choice::II) => (1.0, true),
        (None, Choice::I) => {
            let min_eig = min_eigenvalue_sym(&symmetrize(&(&w - p_of(ALPHA_MAX))));
            return Err(EstimatorError::LmiInfeasibleAtStep { subsystem: i, t, min_eig });
        }
    };
    let gap = min_eigenvalue_sym(&symmetrize(&(&w - p_of(alpha))));
    if !violated && gap < -tol {
        return Err(EstimatorError::LmiInfeasibleAtStep { subsystem: i, t, min_eig: gap });
    }
    let new = star.scale(alpha)?;
    check_bounded(i, sub, t, std::slice::from_ref(&new))?;
    Ok(CovUpdate { pis: vec![new], alpha, gap, violated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::matops::Vector;
    use crate::model::build_partition;

    fn build(text: &str) -> PartitionedSystem {
        build_partition(&SystemConfig::from_toml_str(text).unwrap()).unwrap()
    }

    fn scalar(a: f64) -> PartitionedSystem {
        build(&format!(
            "a = [[{a}]]\nc = [[1.0]]\nq = [[1.0]]\nr = [[1.0]]\npi0 = [[1.0]]\nmx0 = [0.0]\n\
             [[subsystems]]\nstates = [0]\noutputs = [0]\n"
        ))
    }

    /// two scalar subsystems, A = [[0.5, e], [e, 0.4]], C = I
    fn pair(e: f64) -> PartitionedSystem {
        build(&format!(
            "a = [[0.5,{e}],[{e},0.4]]\nc = [[1.0,0.0],[0.0,1.0]]\nq = [[1.0,0.0],[0.0,1.0]]\nr = [[1.0,0.0],[0.0,1.0]]\n\
             pi0 = [[1.0,0.0],[0.0,1.0]]\nmx0 = [0.0,0.0]\n\
             [[subsystems]]\nstates = [0]\noutputs = [0]\n[[subsystems]]\nstates = [1]\noutputs = [1]\n"
        ))
    }

    fn nominal(sub: &Subsystem, n: usize) -> (Vec<SpdMat>, Vec<SpdMat>) {
        (vec![sub.q.clone(); n], vec![sub.r.clone(); n])
    }

    #[test]
    fn scalar_kalman_update() {
        let s = scalar(0.5);
        let sub = &s.subsystems[0];
        let p = pi_star(&SpdMat::identity(1), sub, &sub.q, &sub.r).unwrap();
        assert!((p.mat()[(0, 0)] - 1.125).abs() < 1e-15);
    }

    #[test]
    fn decoupled_choice_ii_equality() {
        for horizon in 1..4 {
            let s = pair(0.0);
            let (q, r) = nominal(&s.subsystems[0], horizon);
            let ci1 = c_i1(&s, 0);
            assert_eq!(ci1, Mat::zeros(1, 1));
            let pi = SpdMat::from_diagonal(&[1.7]).unwrap();
            let up = pmhe1_cov_update(&s, 0, Choice::II, 5, &[pi.clone()], &q, &r, Some(&ci1)).unwrap();
            let star = pi_star(&pi, &s.subsystems[0], &q[0], &r[0]).unwrap();
            let w = pmhe1_w(&s.subsystems[0], &star, &q, &r).unwrap();
            let p = pmhe1_p_case2(&up.pis[0], &ci1, horizon);
            let (_, c2, c3) = c_stacks(&s.subsystems[0], horizon);
            let m = &w - &p - (c2.transpose() * &c2 + c3.transpose() * &c3);
            assert!(m.amax() < 1e-12, "N={horizon}");
        }
    }

    #[test]
    fn w_n1_is_inverse_star() {
        let s = scalar(0.7);
        let sub = &s.subsystems[0];
        let star = SpdMat::from_diagonal(&[2.5]).unwrap();
        let w = pmhe1_w(sub, &star, &[sub.q.clone()], &[sub.r.clone()]).unwrap();
        assert!((w[(0, 0)] - 0.4).abs() < 1e-15);
        let w2 = pmhe2_w(sub, &star, &[sub.q.clone()], &[sub.r.clone()]).unwrap();
        assert!((w2[(0, 0)] - 0.4).abs() < 1e-15);
    }

    /// W₁ is the Hessian of the transit cost over x_{t−N+1..t}: ½‖x_1−·‖²_{Π*⁻¹}
    /// + Σ ½‖x_{k+1} − A x_k‖²_{Q⁻¹} + Σ ½‖y − C x_k‖²_{R⁻¹}; recovered by finite differences.
    #[test]
    fn w_matches_finite_difference_hessian() {
        let s = scalar(1.0);
        let sub = &s.subsystems[0];
        let horizon = 2;
        let (q, r) = nominal(sub, horizon);
        let star = SpdMat::identity(1);
        let w = pmhe1_w(sub, &star, &q, &r).unwrap();
        let cost = |x: &Vector| {
            0.5 * (x[0] - 0.3).powi(2) + 0.5 * (x[1] - x[0]).powi(2) + 0.5 * (0.7 - x[0]).powi(2)
        };
        let h = 1e-4;
        let base = Vector::from_vec(vec![0.1, -0.2]);
        for a in 0..2 {
            for b in 0..2 {
                let mut pp = base.clone();
                pp[a] += h;
                pp[b] += h;
                let mut pm = base.clone();
                pm[a] += h;
                pm[b] -= h;
                let mut mp = base.clone();
                mp[a] -= h;
                mp[b] += h;
                let mut mm = base.clone();
                mm[a] -= h;
                mm[b] -= h;
                let fd = (cost(&pp) - cost(&pm) - cost(&mp) + cost(&mm)) / (4.0 * h * h);
                assert!((fd - w[(a, b)]).abs() < 1e-6, "({a},{b}) {fd} vs {}", w[(a, b)]);
            }
        }
    }

    #[test]
    fn offline_test_small_vs_large_coupling() {
        let small = pmhe1_offline_test(&pair(0.05), 0, 2).unwrap();
        assert!(small.passed, "{}", small.min_eig);
        let large = pmhe1_offline_test(&pair(2.0), 0, 2).unwrap();
        assert!(!large.passed, "{}", large.min_eig);
        let decoupled = pmhe1_offline_test(&pair(0.0), 1, 3).unwrap();
        assert!(decoupled.passed);
    }

    #[test]
    fn offline_test_short_horizon() {
        let s = build(
            "a = [[1.0,1.0],[0.0,1.0]]\nc = [[1.0,0.0]]\nq = [[1.0,0.0],[0.0,1.0]]\nr = [[1.0]]\n\
             pi0 = [[1.0,0.0],[0.0,1.0]]\nmx0 = [0.0,0.0]\n[[subsystems]]\nstates = [0,1]\noutputs = [0]\n",
        );
        assert!(matches!(pmhe1_offline_test(&s, 0, 1), Err(EstimatorError::Model(_))));
    }

    #[test]
    fn choice_i_window_verifies() {
        for e in [0.0, 0.3] {
            let s = pair(e);
            let horizon = 3;
            let (q, r) = nominal(&s.subsystems[0], horizon);
            let pis = vec![SpdMat::identity(1); horizon];
            let up = pmhe1_cov_update(&s, 0, Choice::I, 4, &pis, &q, &r, None).unwrap();
            assert_eq!(up.pis.len(), horizon);
            assert!(up.alpha >= 1.0);
            let star = pi_star(&pis[0], &s.subsystems[0], &q[0], &r[0]).unwrap();
            let w = pmhe1_w(&s.subsystems[0], &star, &q, &r).unwrap();
            assert!(psd_leq(&pmhe1_p_case1(&up.pis), &w, 1e-9).unwrap());
        }
    }

    #[test]
    fn c_w_and_pi_star_star() {
        let s = scalar(0.5);
        let sub = &s.subsystems[0];
        let (q, r) = nominal(sub, 2);
        assert_eq!(c_w(sub, 2), Mat::zeros(1, 1));
        assert_eq!(pmhe2_pi_star_star(sub, &q, &r).unwrap().mat(), sub.r.mat());
        let cw = c_w(sub, 4);
        assert_eq!(cw[(1, 0)], 1.0);
        assert_eq!(cw[(2, 0)], 0.5);
        assert_eq!(cw[(2, 1)], 1.0);
        assert_eq!(cw[(0, 0)], 0.0);
    }

    #[test]
    fn omega_example() {
        // ‖A‖ = 1, unit-norm coupling Gram term, N = 2 → ω = 2
        let s = build(
            "a = [[0.0,1.0],[0.0,0.0]]\nc = [[1.0,0.0],[0.0,1.0]]\nq = [[1.0,0.0],[0.0,1.0]]\nr = [[1.0,0.0],[0.0,1.0]]\n\
             pi0 = [[1.0,0.0],[0.0,1.0]]\nmx0 = [0.0,0.0]\n\
             [[subsystems]]\nstates = [0]\noutputs = [0]\n[[subsystems]]\nstates = [1]\noutputs = [1]\n",
        );
        assert!((omega_scalar(&s, 2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pmhe2_updates() {
        let s = pair(0.0);
        let (q, r) = nominal(&s.subsystems[0], 2);
        let pi = SpdMat::identity(1);
        let up = pmhe2_cov_update(&s, 0, Choice::II, 3, &pi, &q, &r, 0.0).unwrap();
        assert_eq!(up.alpha, 1.0);
        assert!(!up.violated);
        let star = pi_star(&pi, &s.subsystems[0], &q[0], &r[0]).unwrap();
        assert!((up.pis[0].mat() - star.mat()).amax() < 1e-15);
        let up1 = pmhe2_cov_update(&s, 0, Choice::I, 3, &pi, &q, &r, 0.0).unwrap();
        let w = pmhe2_w(&s.subsystems[0], &star, &q, &r).unwrap();
        assert!(psd_leq(&pmhe2_p(Choice::I, &up1.pis[0], 0.0, 2), &w, 1e-9).unwrap());
        let bad = pmhe2_cov_update(&pair(0.9), 0, Choice::II, 3, &pi, &q, &r, 100.0).unwrap();
        assert!(bad.violated);
    }
}
