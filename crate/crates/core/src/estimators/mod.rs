//! Partition-based moving-horizon estimators PMHE1/2/3, their weights and
//! covariance updates, and the centralized baselines.

mod baseline;
mod covariance;
mod local;
mod mhe;
mod weights;

pub use baseline::{centralized_kf, KalmanFilter};
pub use covariance::{
    c_i1, c_stacks, c_w, omega_scalar, pi_star, pmhe1_cov_update, pmhe1_offline_test, pmhe1_p_case1,
    pmhe1_p_case2, pmhe1_w, pmhe2_cov_update, pmhe2_p, pmhe2_pi_star_star, pmhe2_w, CovUpdate, TestReport,
    ALPHA_MAX, LMI_TOL, UNBOUNDED_FACTOR,
};
pub use local::{warmup_init, CovInfo, LocalState, StepInput, StepOutput, StepStats};
pub use mhe::{assemble_mhe, MheProblem, PriorWeight, WindowData, WindowSolution};
pub use weights::{pi_open_loop, weights_model1, weights_model2};

use crate::config::{Choice, SchemeConfig};
use crate::matops::LinalgError;
use crate::model::ModelError;
use crate::qpsolve::QpError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("subsystem {subsystem}: missing covariance of neighbor {neighbor}")]
    MissingNeighborCovariance { subsystem: usize, neighbor: usize },
    #[error("scheme/policy mismatch: {0}")]
    SchemePolicyMismatch(String),
    #[error("subsystem {subsystem}: covariance inequality infeasible at t={t} (min eigenvalue {min_eig:e})")]
    LmiInfeasibleAtStep { subsystem: usize, t: usize, min_eig: f64 },
    #[error("subsystem {subsystem}: covariance norm {norm:e} exceeds the growth bound at t={t}")]
    UnboundedCovariance { subsystem: usize, t: usize, norm: f64 },
    #[error("subsystem {subsystem}: offline admissibility test failed (min eigenvalue {min_eig:e})")]
    OfflineTestFailed { subsystem: usize, min_eig: f64 },
    #[error("subsystem {subsystem}: {source}")]
    Qp { subsystem: usize, source: QpError },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Distributed scheme with its weight policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scheme {
    Pmhe1(Choice),
    Pmhe2(Choice),
    Pmhe3 { mu: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommModel {
    /// neighbor-to-neighbor
    Model1,
    /// all-to-all
    Model2,
}

impl Scheme {
    pub fn r(&self) -> u8 {
        match self {
            Scheme::Pmhe1(_) => 1,
            Scheme::Pmhe2(_) => 2,
            Scheme::Pmhe3 { .. } => 3,
        }
    }

    pub fn model(&self) -> CommModel {
        match self {
            Scheme::Pmhe1(_) => CommModel::Model1,
            _ => CommModel::Model2,
        }
    }

    pub fn choice(&self) -> Option<Choice> {
        match self {
            Scheme::Pmhe1(c) | Scheme::Pmhe2(c) => Some(*c),
            Scheme::Pmhe3 { .. } => None,
        }
    }

    /// Whether covariance blocks travel with the estimates.
    pub fn sends_covariance(&self) -> bool {
        self.choice() == Some(Choice::I)
    }

    pub fn label(&self) -> String {
        match self {
            Scheme::Pmhe1(c) => format!("pmhe1-{c:?}"),
            Scheme::Pmhe2(c) => format!("pmhe2-{c:?}"),
            Scheme::Pmhe3 { .. } => "pmhe3".to_string(),
        }
    }

    pub fn from_config(cfg: &SchemeConfig) -> Option<Scheme> {
        match cfg {
            SchemeConfig::Pmhe1 { choice } => Some(Scheme::Pmhe1(*choice)),
            SchemeConfig::Pmhe2 { choice } => Some(Scheme::Pmhe2(*choice)),
            SchemeConfig::Pmhe3 { mu } => Some(Scheme::Pmhe3 { mu: *mu }),
            _ => None,
        }
    }
}
