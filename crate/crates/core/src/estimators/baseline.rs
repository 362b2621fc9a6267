//! Centralized time-varying Kalman filter on the collective model.

use super::EstimatorError;
use crate::matops::{kalman_gain, riccati_plus, riccati_r, symmetrize, SpdMat, Vector};
use crate::model::PartitionedSystem;

/// Predictor form: `pred` holds x̂_{t|t−1}, `pred_cov` its covariance.
#[derive(Clone, Debug)]
pub struct KalmanFilter {
    pub pred: Vector,
    pub pred_cov: SpdMat,
    pub t: usize,
}

impl KalmanFilter {
    pub fn new(sys: &PartitionedSystem) -> Self {
        KalmanFilter { pred: sys.mx0.clone(), pred_cov: sys.pi0.clone(), t: 0 }
    }

    /// Consume y_t; returns the filtered x̂_{t|t} and advances to x̂_{t+1|t}.
    pub fn update(&mut self, sys: &PartitionedSystem, y: &Vector) -> Result<Vector, EstimatorError> {
        let k = kalman_gain(&self.pred_cov, &sys.c, &sys.ro)?;
        let filt = &self.pred + &k * (y - &sys.c * &self.pred);
        let filt_cov = riccati_r(&self.pred_cov, &sys.c, &sys.ro)?;
        self.pred = &sys.a * &filt;
        self.pred_cov = riccati_plus(&filt_cov, &sys.a, &sys.qo)?;
        self.pred_cov = SpdMat::new(symmetrize(self.pred_cov.mat()))?;
        self.t += 1;
        Ok(filt)
    }
}

/// One-step predictions x̂_{t|t−1} for t = 0..ys.len() (index 0 is m_x0).
pub fn centralized_kf(sys: &PartitionedSystem, ys: &[Vector]) -> Result<Vec<Vector>, EstimatorError> {
    let mut kf = KalmanFilter::new(sys);
    let mut out = vec![kf.pred.clone()];
    for y in ys {
        kf.update(sys, y)?;
        out.push(kf.pred.clone());
    }
    Ok(out)
}
