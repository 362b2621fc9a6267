//! Noise weights inflated by the uncertainty of transmitted estimates.

use super::EstimatorError;
use crate::matops::{symmetrize, Mat, SpdMat};
use crate::model::PartitionedSystem;
use std::collections::BTreeMap;

/// Model 1: Q̄ = Q + Ã Δx Π Ãᵀ, R̄ = R + C̃ Δy Π C̃ᵀ with Π block-diagonal over
/// the neighbors of `i`. `pis` maps neighbor id to Π^{[j]}_{k/t−1}.
pub fn weights_model1(
    sys: &PartitionedSystem,
    i: usize,
    pis: &BTreeMap<usize, Mat>,
) -> Result<(SpdMat, SpdMat), EstimatorError> {
    let sub = &sys.subsystems[i];
    let g = &sys.graph;
    let mut q = sub.q.mat().clone();
    let mut r = sub.r.mat().clone();
    for j in 0..sys.m() {
        if !(g.a_nz[i][j] || g.c_nz[i][j]) {
            continue;
        }
        let pj = pis.get(&j).ok_or(EstimatorError::MissingNeighborCovariance { subsystem: i, neighbor: j })?;
        if g.a_nz[i][j] {
            let aij = sys.a_tilde_block(i, j);
            q += &aij * pj * aij.transpose() * g.nu_x[j] as f64;
        }
        if g.c_nz[i][j] {
            let cij = sys.c_tilde_block(i, j);
            r += &cij * pj * cij.transpose() * g.nu_y[j] as f64;
        }
    }
    Ok((SpdMat::new(symmetrize(&q))?, SpdMat::new(symmetrize(&r))?))
}

/// Π^ol for offsets 0..steps−1 from the window start: Π^ol_0 = Π, Π^ol_{s+1} = A Π^ol_s Aᵀ + Q.
pub fn pi_open_loop(sys: &PartitionedSystem, pi_first: &Mat, steps: usize) -> Vec<Mat> {
    let q = sys.q_blockdiag();
    let mut out = Vec::with_capacity(steps);
    let mut cur = symmetrize(pi_first);
    for s in 0..steps {
        if s > 0 {
            cur = symmetrize(&(&sys.a * &cur * sys.a.transpose() + &q));
        }
        out.push(cur.clone());
    }
    out
}

fn sqrt_counts(sys: &PartitionedSystem, counts: &[usize]) -> Vec<f64> {
    let mut d = vec![0.0; sys.n()];
    for (j, s) in sys.subsystems.iter().enumerate() {
        for k in s.states.clone() {
            d[k] = (counts[j] as f64).sqrt();
        }
    }
    d
}

/// Model 2: weights built from the open-loop covariance Π^ol (full n×n). The
/// count scaling is applied symmetrically, Δ^{1/2} Π^ol Δ^{1/2}, which equals
/// Δ Π when Π is block-diagonal.
pub fn weights_model2(sys: &PartitionedSystem, i: usize, pi_ol: &Mat) -> Result<(SpdMat, SpdMat), EstimatorError> {
    let sub = &sys.subsystems[i];
    let dx = sqrt_counts(sys, &sys.graph.nu_x);
    let dy = sqrt_counts(sys, &sys.graph.nu_y);
    let scaled = |d: &[f64]| Mat::from_fn(pi_ol.nrows(), pi_ol.ncols(), |r, c| d[r] * pi_ol[(r, c)] * d[c]);
    let q = sub.q.mat() + &sub.a_tilde * scaled(&dx) * sub.a_tilde.transpose();
    let r = sub.r.mat() + &sub.c_tilde * scaled(&dy) * sub.c_tilde.transpose();
    Ok((SpdMat::new(symmetrize(&q))?, SpdMat::new(symmetrize(&r))?))
}
