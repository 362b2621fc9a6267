#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pmhe::config::{ConstraintConfig, ExperimentConfig, SchemeConfig, SubsystemConfig, SystemConfig};
use pmhe::matops::spectral_radius;
use pmhe::matops::Vector;
use pmhe::netsim::SubsystemRecord;
use pmhe::model::PartitionedSystem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = DMatrix<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct Gen {
    pub sizes: Vec<usize>,
    /// Outputs per subsystem; `None` gives p_i = n_i.
    pub outputs: Option<Vec<usize>>,
    pub coupling: f64,
    pub out_coupling: f64,
    pub rho: (f64, f64),
    /// Neighbors only along a chain when true, otherwise all pairs.
    pub chain: bool,
    pub box_bound: Option<f64>,
}

impl Default for Gen {
    fn default() -> Self {
        Gen {
            sizes: vec![1, 2, 1],
            outputs: None,
            coupling: 0.1,
            out_coupling: 0.0,
            rho: (0.4, 0.95),
            chain: true,
            box_bound: None,
        }
    }
}

fn rows(m: &M) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(rand_distr::StandardNormal)
}

/// Random coupled system with block-diagonal noise covariances.
pub fn random_system(seed: u64, g: &Gen) -> SystemConfig {
    let mut r = rng(seed);
    let m = g.sizes.len();
    let n: usize = g.sizes.iter().sum();
    let outs: Vec<usize> = g.outputs.clone().unwrap_or_else(|| g.sizes.clone());
    let p: usize = outs.iter().sum();
    let off: Vec<usize> = g.sizes.iter().scan(0, |s, &k| { let o = *s; *s += k; Some(o) }).collect();
    let poff: Vec<usize> = outs.iter().scan(0, |s, &k| { let o = *s; *s += k; Some(o) }).collect();
    let mut a = M::zeros(n, n);
    let mut c = M::zeros(p, n);
    for i in 0..m {
        let ni = g.sizes[i];
        let blk = M::from_fn(ni, ni, |_, _| gauss(&mut r));
        let rho = spectral_radius(&blk).unwrap().max(1e-3);
        let target = r.gen_range(g.rho.0..=g.rho.1);
        a.view_mut((off[i], off[i]), (ni, ni)).copy_from(&(blk * (target / rho)));
        let ci = M::from_fn(outs[i], ni, |rr, cc| if rr == cc { 1.0 } else { 0.0 } + 0.3 * gauss(&mut r));
        c.view_mut((poff[i], off[i]), (outs[i], ni)).copy_from(&ci);
        for j in 0..m {
            let adjacent = if g.chain { i.abs_diff(j) == 1 } else { i != j };
            if !adjacent {
                continue;
            }
            if g.coupling > 0.0 {
                let aij = M::from_fn(ni, g.sizes[j], |_, _| g.coupling * gauss(&mut r));
                a.view_mut((off[i], off[j]), (ni, g.sizes[j])).copy_from(&aij);
            }
            if g.out_coupling > 0.0 {
                let cij = M::from_fn(outs[i], g.sizes[j], |_, _| g.out_coupling * gauss(&mut r));
                c.view_mut((poff[i], off[j]), (outs[i], g.sizes[j])).copy_from(&cij);
            }
        }
    }
    let diag = |k: usize, r: &mut ChaCha8Rng, lo: f64, hi: f64| M::from_diagonal(&DVector::from_fn(k, |_, _| r.gen_range(lo..hi)));
    let q = diag(n, &mut r, 0.05, 0.2);
    let rr = diag(p, &mut r, 0.05, 0.2);
    let pi0 = diag(n, &mut r, 0.5, 2.0);
    SystemConfig {
        a: rows(&a),
        c: rows(&c),
        q: rows(&q),
        r: rows(&rr),
        pi0: rows(&pi0),
        mx0: vec![0.0; n],
        subsystems: (0..m)
            .map(|i| SubsystemConfig {
                states: (off[i]..off[i] + g.sizes[i]).collect(),
                outputs: (poff[i]..poff[i] + outs[i]).collect(),
                q: None,
                r: None,
                pi0: None,
                constraint: g.box_bound.map(|b| ConstraintConfig::Box {
                    lower: vec![-b; g.sizes[i]],
                    upper: vec![b; g.sizes[i]],
                }),
            })
            .collect(),
    }
}

pub fn random_x0(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut r = rng(seed ^ 0xABCD);
    (0..n).map(|_| scale * gauss(&mut r)).collect()
}

pub fn experiment(horizon: usize, rounds: usize, noisy: bool, seed: u64, x0: Option<Vec<f64>>, schemes: Vec<SchemeConfig>) -> ExperimentConfig {
    ExperimentConfig {
        horizon,
        rounds,
        noise: if noisy { pmhe::config::NoiseKind::Gaussian } else { pmhe::config::NoiseKind::Noiseless },
        seed,
        x0,
        model2_prior: Default::default(),
        strict_certificate: false,
        output_dir: None,
        schemes,
    }
}

fn dm(v: &Vector) -> DVector<f64> {
    v.clone()
}

/// Time-varying Kalman filter plus RTS smoother on the local model with the
/// recorded crosstalk as a known input. Returns smoothed x_{t−N..t}; the last
/// entry is the one-step prediction.
pub fn local_kf_rts(sys: &PartitionedSystem, i: usize, rec: &SubsystemRecord) -> Vec<DVector<f64>> {
    let sub = &sys.subsystems[i];
    let (a, c) = (sub.a.clone(), sub.c.clone());
    let at = sub.a_tilde.clone();
    let ct = sub.c_tilde.clone();
    let p0 = rec.prior_cov.as_ref().expect("prior covariance");
    let mut x = dm(&rec.input.prior);
    let mut p = p0.clone();
    let horizon = rec.input.y.len();
    let (mut xf, mut pf, mut xp, mut pp) = (vec![], vec![], vec![x.clone()], vec![p.clone()]);
    for j in 0..horizon {
        let xt = dm(&rec.input.crosstalk[j]);
        let rj = rec.r[j].clone();
        let qj = rec.q[j].clone();
        let s = &c * &p * c.transpose() + rj;
        let k = &p * c.transpose() * s.try_inverse().unwrap();
        let innov = dm(&rec.input.y[j]) - &c * &x - &ct * &xt;
        let xj = &x + &k * innov;
        let pj = &p - &k * &c * &p;
        x = &a * &xj + &at * &xt;
        p = &a * &pj * a.transpose() + qj;
        xf.push(xj);
        pf.push(pj);
        xp.push(x.clone());
        pp.push(p.clone());
    }
    let mut out = vec![DVector::zeros(0); horizon + 1];
    out[horizon] = x;
    for j in (0..horizon).rev() {
        let g = &pf[j] * a.transpose() * pp[j + 1].clone().try_inverse().unwrap();
        out[j] = &xf[j] + g * (&out[j + 1] - &xp[j + 1]);
    }
    out
}

/// Dense least-squares centralized MHE over stacked states with the
/// Kalman-propagated prior covariance; returns x̂_{t/t} for t = N..T−1.
pub fn batch_mhe(sys: &PartitionedSystem, horizon: usize, ys: &[Vector]) -> Vec<DVector<f64>> {
    let n = sys.n();
    let to = |m: &pmhe::matops::Mat| m.clone();
    let (a, c, q, r) = (to(&sys.a), to(&sys.c), to(sys.qo.mat()), to(sys.ro.mat()));
    let (qi, ri) = (q.clone().try_inverse().unwrap(), r.clone().try_inverse().unwrap());
    // warmup: open-loop mean and Kalman-propagated covariance
    let mut window: Vec<DVector<f64>> = vec![dm(&sys.mx0)];
    for _ in 1..horizon {
        let last = window.last().unwrap().clone();
        window.push(&a * last);
    }
    let mut start = 0usize;
    let mut pi = to(sys.pi0.mat());
    let mut out = vec![];
    for t in horizon..ys.len() {
        let prior = window[t - horizon - start].clone();
        let dim = n * (horizon + 1);
        let mut h = M::zeros(dim, dim);
        let mut f = DVector::zeros(dim);
        let pinv = pi.clone().try_inverse().unwrap();
        h.view_mut((0, 0), (n, n)).add_assign(&pinv);
        f.rows_mut(0, n).add_assign(&(&pinv * &prior));
        for k in 0..horizon {
            let y = dm(&ys[t - horizon + k]);
            h.view_mut((n * k, n * k), (n, n)).add_assign(&(c.transpose() * &ri * &c));
            f.rows_mut(n * k, n).add_assign(&(c.transpose() * &ri * y));
            // w_k = x_{k+1} − A x_k
            let mut e = M::zeros(n, dim);
            e.view_mut((0, n * k), (n, n)).copy_from(&(-&a));
            e.view_mut((0, n * (k + 1)), (n, n)).fill_with_identity();
            h += e.transpose() * &qi * &e;
        }
        let z = h.lu().solve(&f).unwrap();
        window = (0..=horizon).map(|k| z.rows(n * k, n).into_owned()).collect();
        start = t - horizon;
        out.push(window[horizon].clone());
        let filt = {
            let s = &c * &pi * c.transpose() + &r;
            let k = &pi * c.transpose() * s.try_inverse().unwrap();
            &pi - k * &c * &pi
        };
        pi = &a * filt * a.transpose() + &q;
    }
    out
}

use std::ops::AddAssign;
