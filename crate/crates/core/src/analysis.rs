//! Convergence certificates and error-dynamics diagnostics.

use crate::estimators::Scheme;
use crate::matops::{spectral_radius, spd_inverse, LinalgError, Mat, Vector};
use crate::model::{mu_interval, partition_quality, powers, ModelError, MuInterval, PartitionedSystem, QualityReport};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const SCHUR_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("scheme mismatch: {0}")]
    SchemeMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schur {
    Stable,
    Marginal,
    Unstable,
}

pub fn schur_status(rho: f64) -> Schur {
    if rho < 1.0 - SCHUR_MARGIN {
        Schur::Stable
    } else if rho <= 1.0 + SCHUR_MARGIN {
        Schur::Marginal
    } else {
        Schur::Unstable
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Certified,
    Uncertified,
    Inapplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: Status,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCertificate {
    pub horizon: usize,
    pub quality: QualityReport,
    pub rho_phi1: f64,
    pub schur_phi1: Schur,
    pub rho_phi2: f64,
    pub schur_phi2: Schur,
    pub a0: f64,
    pub mu: Option<f64>,
    pub a_mu: Option<f64>,
    pub rho_pmhe3: f64,
    pub mu_interval: MuInterval,
    pub a_star_singular: bool,
    pub verdicts: BTreeMap<String, Verdict>,
}

impl ConvergenceCertificate {
    pub fn all_certified(&self) -> bool {
        self.verdicts.values().all(|v| v.status != Status::Uncertified)
    }
}

fn gram_pinv_t(sys: &PartitionedSystem, horizon: usize) -> Result<(Mat, Mat), AnalysisError> {
    sys.check_horizon(horizon)?;
    let ostar = sys.observability_star(horizon);
    let g = spd_inverse(&(ostar.transpose() * &ostar))?;
    Ok((g * ostar.transpose(), ostar))
}

/// C_N: block (r, c) = C* A*^{r−1−c} Ã for c < r, C̃ on the diagonal.
pub fn build_cn(sys: &PartitionedSystem, horizon: usize) -> Mat {
    let (n, p) = (sys.n(), sys.pbar());
    let pw = powers(&sys.a_star, horizon);
    let mut out = Mat::zeros(p * horizon, n * horizon);
    for r in 0..horizon {
        out.view_mut((p * r, n * r), (p, n)).copy_from(&sys.c_tilde);
        for c in 0..r {
            out.view_mut((p * r, n * c), (p, n)).copy_from(&(&sys.c_star * &pw[r - 1 - c] * &sys.a_tilde));
        }
    }
    out
}

/// M1 = [A*; …; A*^N]
pub fn build_m1(sys: &PartitionedSystem, horizon: usize) -> Mat {
    let n = sys.n();
    let pw = powers(&sys.a_star, horizon);
    let mut out = Mat::zeros(n * horizon, n);
    for r in 0..horizon {
        out.view_mut((n * r, 0), (n, n)).copy_from(&pw[r + 1]);
    }
    out
}

/// M2: block (r, c) = A*^{r−c} Ã for c ≤ r.
pub fn build_m2(sys: &PartitionedSystem, horizon: usize) -> Mat {
    let n = sys.n();
    let pw = powers(&sys.a_star, horizon);
    let mut out = Mat::zeros(n * horizon, n * horizon);
    for r in 0..horizon {
        for c in 0..=r {
            out.view_mut((n * r, n * c), (n, n)).copy_from(&(&pw[r - c] * &sys.a_tilde));
        }
    }
    out
}

/// Φ1 = M2 − M1 (O*ᵀO*)⁻¹ O*ᵀ C_N
pub fn build_phi1(sys: &PartitionedSystem, horizon: usize) -> Result<Mat, AnalysisError> {
    let (pinv, _) = gram_pinv_t(sys, horizon)?;
    Ok(build_m2(sys, horizon) - build_m1(sys, horizon) * pinv * build_cn(sys, horizon))
}

/// Φ2 = (O*ᵀO*)⁻¹ O*ᵀ (O* − O) A
pub fn build_phi2(sys: &PartitionedSystem, horizon: usize) -> Result<Mat, AnalysisError> {
    let (pinv, ostar) = gram_pinv_t(sys, horizon)?;
    let o = sys.observability_collective(horizon);
    Ok(pinv * (ostar - o) * &sys.a)
}

/// (μI + O*ᵀO*)⁻¹ [μI + O*ᵀ(O* − O)] A
pub fn pmhe3_error_map(sys: &PartitionedSystem, horizon: usize, mu: f64) -> Result<Mat, AnalysisError> {
    sys.check_horizon(horizon)?;
    let n = sys.n();
    let ostar = sys.observability_star(horizon);
    let o = sys.observability_collective(horizon);
    let id = Mat::identity(n, n);
    let lhs = spd_inverse(&(&id * mu + ostar.transpose() * &ostar))?;
    Ok(lhs * (&id * mu + ostar.transpose() * (&ostar - o)) * &sys.a)
}

/// a(μ) = (μ + f_max Δ_f) / (μ + f_min²) · κ
pub fn a_mu(q: &QualityReport, mu: f64) -> f64 {
    (mu + q.f_max * q.delta_f) / (mu + q.f_min * q.f_min) * q.kappa
}

fn fmt(x: f64) -> String {
    format!("{x:.6e}")
}

/// Certificate for horizon N and optional PMHE3 weight μ (μ = 0 when absent).
pub fn certify(
    sys: &PartitionedSystem,
    horizon: usize,
    mu: Option<f64>,
    strict: bool,
) -> Result<ConvergenceCertificate, AnalysisError> {
    let quality = partition_quality(sys, horizon)?;
    let rho_phi1 = spectral_radius(&build_phi1(sys, horizon)?)?;
    let rho_phi2 = spectral_radius(&build_phi2(sys, horizon)?)?;
    let mu_eff = mu.unwrap_or(0.0);
    let rho3 = spectral_radius(&pmhe3_error_map(sys, horizon, mu_eff)?)?;
    let amu = a_mu(&quality, mu_eff);
    let interval = mu_interval(&quality);
    let a_star_singular = crate::matops::rank(&sys.a_star) < sys.n();
    let (s1, s2, s3) = (schur_status(rho_phi1), schur_status(rho_phi2), schur_status(rho3));

    let mut verdicts = BTreeMap::new();
    let v1 = if s1 == Schur::Stable {
        Verdict { status: Status::Certified, reasons: vec![format!("rho(phi1) = {} < 1", fmt(rho_phi1))] }
    } else {
        let why = if s1 == Schur::Marginal { "rho(phi1) marginal" } else { "rho(phi1) >= 1" };
        Verdict { status: Status::Uncertified, reasons: vec![format!("{why} ({})", fmt(rho_phi1))] }
    };
    verdicts.insert("pmhe1".to_string(), v1);

    let mut r2 = vec![];
    let ok2 = s2 == Schur::Stable || quality.a0 < 1.0;
    r2.push(if s2 == Schur::Stable {
        format!("rho(phi2) = {} < 1", fmt(rho_phi2))
    } else {
        format!("rho(phi2) >= 1 ({})", fmt(rho_phi2))
    });
    r2.push(if quality.a0 < 1.0 { format!("a0 = {} < 1", fmt(quality.a0)) } else { format!("a0 >= 1 ({})", fmt(quality.a0)) });
    verdicts.insert(
        "pmhe2".to_string(),
        Verdict { status: if ok2 { Status::Certified } else { Status::Uncertified }, reasons: r2 },
    );

    let mut r3 = vec![];
    let mut ok3 = s3 == Schur::Stable || amu < 1.0;
    if mu.is_none() {
        r3.push("mu not given, evaluated at mu = 0".to_string());
    }
    r3.push(if s3 == Schur::Stable {
        format!("rho(pmhe3 map) = {} < 1", fmt(rho3))
    } else {
        format!("rho(pmhe3 map) >= 1 ({})", fmt(rho3))
    });
    r3.push(if amu < 1.0 { format!("a(mu) = {} < 1", fmt(amu)) } else { format!("a(mu) >= 1 ({})", fmt(amu)) });
    if !interval.contains(mu_eff) {
        r3.push(format!("mu = {} outside the admissible interval", fmt(mu_eff)));
        if strict {
            ok3 = false;
        }
    }
    if a_star_singular {
        r3.push("A* is singular".to_string());
    }
    verdicts.insert(
        "pmhe3".to_string(),
        Verdict { status: if ok3 { Status::Certified } else { Status::Uncertified }, reasons: r3 },
    );

    Ok(ConvergenceCertificate {
        horizon,
        a0: quality.a0,
        quality,
        rho_phi1,
        schur_phi1: s1,
        rho_phi2,
        schur_phi2: s2,
        mu,
        a_mu: mu.map(|_| amu),
        rho_pmhe3: rho3,
        mu_interval: interval,
        a_star_singular,
        verdicts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDynamicsCheck {
    /// One residual norm per consecutive pair of rounds.
    pub residuals: Vec<f64>,
    pub max: f64,
    pub last: f64,
}

/// Residuals of the predicted error maps over successive rounds.
///
/// `windows[r]` holds the collective window errors ε_{k/t}, k = t−N..t, for
/// consecutive rounds t. PMHE1 uses E_t = Φ1 E_{t−1}; PMHE2 uses
/// O* ε_{t−N/t} = (O* − O) A ε_{t−N−1/t−1}; PMHE3 uses the exact μ-map.
pub fn check_error_dynamics(
    sys: &PartitionedSystem,
    horizon: usize,
    scheme: Scheme,
    windows: &[Vec<Vector>],
) -> Result<ErrorDynamicsCheck, AnalysisError> {
    if let Some(w) = windows.iter().find(|w| w.len() != horizon + 1) {
        return Err(AnalysisError::SchemeMismatch(format!("window of length {} for horizon {horizon}", w.len())));
    }
    let stack = |w: &[Vector]| {
        let n = sys.n();
        let mut v = Vector::zeros(n * horizon);
        for (k, e) in w.iter().skip(1).enumerate() {
            v.rows_mut(n * k, n).copy_from(e);
        }
        v
    };
    let residuals: Vec<f64> = match scheme {
        Scheme::Pmhe1(_) => {
            let phi1 = build_phi1(sys, horizon)?;
            windows.windows(2).map(|p| (stack(&p[1]) - &phi1 * stack(&p[0])).norm()).collect()
        }
        Scheme::Pmhe2(_) => {
            let ostar = sys.observability_star(horizon);
            let gap = (&ostar - sys.observability_collective(horizon)) * &sys.a;
            windows.windows(2).map(|p| (&ostar * &p[1][0] - &gap * &p[0][0]).norm()).collect()
        }
        Scheme::Pmhe3 { mu } => {
            let map = pmhe3_error_map(sys, horizon, mu)?;
            windows.windows(2).map(|p| (&p[1][0] - &map * &p[0][0]).norm()).collect()
        }
    };
    let max = residuals.iter().copied().fold(0.0, f64::max);
    let last = residuals.last().copied().unwrap_or(0.0);
    Ok(ErrorDynamicsCheck { residuals, max, last })
}
