//! Per-subsystem sliding window and one estimation round.

use super::covariance::{c_i1, omega_scalar, pmhe1_cov_update, pmhe1_offline_test, pmhe2_cov_update};
use super::mhe::{assemble_mhe, MheProblem, PriorWeight, WindowData};
use super::weights::{pi_open_loop, weights_model1, weights_model2};
use super::{EstimatorError, Scheme};
use crate::config::Choice;
use crate::matops::{riccati_plus, riccati_r, Mat, SpdMat, Vector};
use crate::model::{powers, PartitionedSystem};
use std::collections::BTreeMap;

/// Covariance blocks shared with other subsystems (choice I only).
#[derive(Clone, Debug)]
pub enum CovInfo {
    None,
    /// Model 1: Π^{[j]}_{k/t−1}, k = t−N..t−1, per neighbor j.
    Window(BTreeMap<usize, Vec<Mat>>),
    /// Model 2: blockdiag_j Π^{[j]}_{t−N/t−1}.
    Collective(Mat),
}

/// Inputs delivered to subsystem i for round t.
#[derive(Clone, Debug)]
pub struct StepInput {
    pub t: usize,
    /// x̂^{[i]}_{t−N/t−1}
    pub prior: Vector,
    /// y^{[i]}_{t−N..t−1}
    pub y: Vec<Vector>,
    /// x̃_{k/t−1}, k = t−N..t−1
    pub crosstalk: Vec<Vector>,
    pub cov: CovInfo,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub theta: f64,
    pub stage_cost: f64,
    pub iterations: usize,
    pub alpha: f64,
    /// min eig(W − P) of the accepted covariance update
    pub lmi_gap: f64,
    pub violation: bool,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub stats: StepStats,
    /// Π^ol or window weights actually used (for diagnostics)
    pub q: Vec<SpdMat>,
    pub r: Vec<SpdMat>,
}

/// Local memory of subsystem i between rounds.
#[derive(Clone, Debug)]
pub struct LocalState {
    pub i: usize,
    pub scheme: Scheme,
    pub horizon: usize,
    /// Absolute time of `xhat[0]`.
    pub start: usize,
    pub xhat: Vec<Vector>,
    /// Absolute time of `pis[0]`.
    pub pi_start: usize,
    pub pis: Vec<SpdMat>,
    pub theta: f64,
    pub active: Vec<usize>,
    ci1: Option<Mat>,
    omega: f64,
}

/// Estimates x̂_{k/N−1}, k = 0..N−1, from open-loop propagation of m_x0,
/// projected on each X_i; covariances from the local Riccati recursion
/// seeded at Π0^{[i]} (a full window for PMHE1-I, Π0^{[i]} otherwise).
pub fn warmup_init(sys: &PartitionedSystem, scheme: Scheme, horizon: usize) -> Result<Vec<LocalState>, EstimatorError> {
    let pw = powers(&sys.a, horizon.saturating_sub(1));
    let traj: Vec<Vector> = pw.iter().map(|p| p * &sys.mx0).collect();
    let omega = match scheme {
        Scheme::Pmhe2(Choice::II) => omega_scalar(sys, horizon)?,
        _ => 0.0,
    };
    let mut out = Vec::with_capacity(sys.m());
    for (i, sub) in sys.subsystems.iter().enumerate() {
        let mut xhat = Vec::with_capacity(horizon);
        for x in &traj {
            let local = x.rows(sub.states.start, sub.n()).into_owned();
            let proj = sub.constraint.project(&local).map_err(|source| EstimatorError::Qp { subsystem: i, source })?;
            xhat.push(proj);
        }
        let pis = match scheme {
            Scheme::Pmhe1(Choice::I) => {
                let mut v = vec![sub.pi0.clone()];
                for _ in 1..horizon {
                    let last = v.last().expect("nonempty");
                    let next = riccati_plus(&riccati_r(last, &sub.c, &sub.r)?, &sub.a, &sub.q)?;
                    v.push(next);
                }
                v
            }
            Scheme::Pmhe3 { .. } => vec![],
            _ => vec![sub.pi0.clone()],
        };
        let ci1 = match scheme {
            Scheme::Pmhe1(Choice::II) => {
                let rep = pmhe1_offline_test(sys, i, horizon)?;
                if !rep.passed {
                    return Err(EstimatorError::OfflineTestFailed { subsystem: i, min_eig: rep.min_eig });
                }
                Some(c_i1(sys, i))
            }
            _ => None,
        };
        out.push(LocalState {
            i,
            scheme,
            horizon,
            start: 0,
            xhat,
            pi_start: 0,
            pis,
            theta: 0.0,
            active: vec![],
            ci1,
            omega,
        });
    }
    Ok(out)
}

impl LocalState {
    /// x̂^{[i]}_{k/·} from the current window.
    pub fn estimate_at(&self, k: usize) -> Option<&Vector> {
        k.checked_sub(self.start).and_then(|o| self.xhat.get(o))
    }

    /// Π^{[i]}_{k/·} from the current covariance memory.
    pub fn pi_at(&self, k: usize) -> Option<&SpdMat> {
        k.checked_sub(self.pi_start).and_then(|o| self.pis.get(o))
    }

    /// Newest estimate x̂_{t/t}.
    pub fn latest(&self) -> &Vector {
        self.xhat.last().expect("window is nonempty")
    }

    fn stage_weights(&self, sys: &PartitionedSystem, input: &StepInput) -> Result<(Vec<SpdMat>, Vec<SpdMat>), EstimatorError> {
        let sub = &sys.subsystems[self.i];
        let n = self.horizon;
        let nominal = || (vec![sub.q.clone(); n], vec![sub.r.clone(); n]);
        match (self.scheme, &input.cov) {
            (Scheme::Pmhe3 { .. }, _) => Ok((vec![], vec![])),
            (Scheme::Pmhe1(Choice::II) | Scheme::Pmhe2(Choice::II), _) => Ok(nominal()),
            (Scheme::Pmhe1(Choice::I), CovInfo::Window(map)) => {
                let (mut q, mut r) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for j in 0..n {
                    let at: BTreeMap<usize, Mat> = map.iter().map(|(&nb, w)| (nb, w[j].clone())).collect();
                    let (qj, rj) = weights_model1(sys, self.i, &at)?;
                    q.push(qj);
                    r.push(rj);
                }
                Ok((q, r))
            }
            (Scheme::Pmhe1(Choice::I), CovInfo::None) if sys.graph.neighbors[self.i].is_empty() => {
                let none = BTreeMap::new();
                let (qj, rj) = weights_model1(sys, self.i, &none)?;
                Ok((vec![qj; n], vec![rj; n]))
            }
            (Scheme::Pmhe2(Choice::I), CovInfo::Collective(pi)) => {
                let ol = pi_open_loop(sys, pi, n);
                let (mut q, mut r) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for p in &ol {
                    let (qj, rj) = weights_model2(sys, self.i, p)?;
                    q.push(qj);
                    r.push(rj);
                }
                Ok((q, r))
            }
            _ => Err(EstimatorError::SchemePolicyMismatch(format!(
                "{} received incompatible covariance information",
                self.scheme.label()
            ))),
        }
    }

    /// Window problem of round t together with the stage weights it uses.
    pub fn build_problem(
        &self,
        sys: &PartitionedSystem,
        input: &StepInput,
    ) -> Result<(MheProblem, Vec<SpdMat>, Vec<SpdMat>), EstimatorError> {
        let n = self.horizon;
        let (q, r) = self.stage_weights(sys, input)?;
        let prior_weight = match self.scheme {
            Scheme::Pmhe3 { mu } => PriorWeight::Mu(mu),
            _ => {
                let p = self.pi_at(input.t - n).ok_or_else(|| {
                    EstimatorError::SchemePolicyMismatch(format!(
                        "no covariance for time {} at subsystem {}",
                        input.t - n,
                        self.i
                    ))
                })?;
                PriorWeight::Cov(p.clone())
            }
        };
        let data = WindowData {
            prior: input.prior.clone(),
            prior_weight,
            y: input.y.clone(),
            crosstalk: input.crosstalk.clone(),
            q: q.clone(),
            r: r.clone(),
            theta_prev: self.theta,
        };
        Ok((assemble_mhe(sys, self.i, self.scheme.r(), data)?, q, r))
    }

    /// Solve MHE-i at time t and update the window and covariances.
    pub fn step(&mut self, sys: &PartitionedSystem, input: &StepInput) -> Result<StepOutput, EstimatorError> {
        let t = input.t;
        let n = self.horizon;
        let (problem, q, r) = self.build_problem(sys, input)?;
        let sol = problem.solve(self.i, &self.active)?;
        let mut stats = StepStats {
            theta: sol.value,
            stage_cost: sol.stage_cost,
            iterations: sol.iterations,
            alpha: 1.0,
            lmi_gap: 0.0,
            violation: false,
        };
        match self.scheme {
            Scheme::Pmhe1(choice) => {
                let pis: Vec<SpdMat> = match choice {
                    Choice::I => self.pis.clone(),
                    Choice::II => vec![self.pis[0].clone()],
                };
                let up = pmhe1_cov_update(sys, self.i, choice, t, &pis, &q, &r, self.ci1.as_ref())?;
                stats.alpha = up.alpha;
                stats.lmi_gap = up.gap;
                self.pis = up.pis;
                self.pi_start = t - n + 1;
            }
            Scheme::Pmhe2(choice) => {
                let up = pmhe2_cov_update(sys, self.i, choice, t, &self.pis[0], &q, &r, self.omega)?;
                stats.alpha = up.alpha;
                stats.lmi_gap = up.gap;
                stats.violation = up.violated;
                self.pis = up.pis;
                self.pi_start = t - n + 1;
            }
            Scheme::Pmhe3 { .. } => {}
        }
        self.xhat = sol.states;
        self.start = t - n;
        self.theta = sol.value;
        self.active = sol.active_set;
        Ok(StepOutput { stats, q, r })
    }
}
