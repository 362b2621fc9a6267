//! Collective system, its partition into subsystems, coupling graph, constraint
//! sets, observability metadata and partition quality.

use crate::config::{ConstraintConfig, Matrix, SubsystemConfig, SystemConfig};
use crate::matops::{block_diag, norm2, rank, singular_extremes, symmetrize, LinalgError, Mat, SpdMat, Vector};
use crate::qpsolve::{self, Qp, QpError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::ops::Range;
use thiserror::Error;

/// Blocks whose max-abs entry is below this are structural zeros.
pub const ZERO_BLOCK_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("key `{key}`: {message}")]
    Dimension { key: String, message: String },
    #[error("state {index} is assigned to more than one subsystem")]
    OverlappingStates { index: usize },
    #[error("state {index} is not assigned to any subsystem")]
    UncoveredStates { index: usize },
    #[error("output row {row} is not observed by any subsystem (H is rank deficient)")]
    RankDeficientH { row: usize },
    #[error("subsystem {0}: (A_i, C_i) is not observable")]
    NonObservablePair(usize),
    #[error("pair (A, C) is not observable")]
    NotObservable,
    #[error("horizon {horizon} is shorter than the required {required}")]
    HorizonTooShort { horizon: usize, required: usize },
    #[error("subsystem {subsystem}: invalid constraint: {message}")]
    InvalidConstraint { subsystem: usize, message: String },
    #[error("key `{key}`: matrix is not symmetric positive definite")]
    NotPositiveDefinite { key: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn dim_err(key: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Dimension { key: key.into(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintSet {
    Unbounded,
    /// Per-coordinate bounds; infinite entries allowed.
    Box { lower: Vector, upper: Vector },
    /// { z : G z ≤ h }
    Polytope { g: Mat, h: Vector },
}

impl ConstraintSet {
    pub fn is_unbounded(&self) -> bool {
        match self {
            ConstraintSet::Unbounded => true,
            ConstraintSet::Box { lower, upper } => lower.iter().chain(upper.iter()).all(|v| v.is_infinite()),
            ConstraintSet::Polytope { g, .. } => g.nrows() == 0,
        }
    }

    /// Finite halfspace description (G, h) over a space of dimension n.
    pub fn halfspaces(&self, n: usize) -> (Mat, Vector) {
        match self {
            ConstraintSet::Unbounded => (Mat::zeros(0, n), Vector::zeros(0)),
            ConstraintSet::Box { lower, upper } => {
                let mut rows: Vec<(usize, f64, f64)> = Vec::new();
                for k in 0..n {
                    if upper[k].is_finite() {
                        rows.push((k, 1.0, upper[k]));
                    }
                    if lower[k].is_finite() {
                        rows.push((k, -1.0, -lower[k]));
                    }
                }
                let mut g = Mat::zeros(rows.len(), n);
                let mut h = Vector::zeros(rows.len());
                for (r, (k, s, b)) in rows.into_iter().enumerate() {
                    g[(r, k)] = s;
                    h[r] = b;
                }
                (g, h)
            }
            ConstraintSet::Polytope { g, h } => (g.clone(), h.clone()),
        }
    }

    pub fn max_violation(&self, x: &Vector) -> f64 {
        let (g, h) = self.halfspaces(x.len());
        if g.nrows() == 0 {
            return 0.0;
        }
        (g * x - h).iter().copied().fold(0.0, f64::max)
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        self.max_violation(x) <= tol
    }

    /// Euclidean projection.
    pub fn project(&self, x: &Vector) -> Result<Vector, QpError> {
        match self {
            ConstraintSet::Unbounded => Ok(x.clone()),
            ConstraintSet::Box { lower, upper } => {
                Ok(Vector::from_fn(x.len(), |k, _| x[k].max(lower[k]).min(upper[k])))
            }
            ConstraintSet::Polytope { g, h } => {
                let n = x.len();
                let mut qp = Qp::new(Mat::identity(n, n), -x, 0.5 * x.norm_squared());
                qp.push_ineq(g, h);
                Ok(qpsolve::solve(&qp)?.z)
            }
        }
    }

    /// Cartesian product of per-block sets.
    pub fn product(parts: &[(ConstraintSet, usize)]) -> ConstraintSet {
        let n: usize = parts.iter().map(|p| p.1).sum();
        if parts.iter().all(|(s, _)| matches!(s, ConstraintSet::Unbounded)) {
            return ConstraintSet::Unbounded;
        }
        if parts.iter().all(|(s, _)| !matches!(s, ConstraintSet::Polytope { .. })) {
            let mut lower = Vector::from_element(n, f64::NEG_INFINITY);
            let mut upper = Vector::from_element(n, f64::INFINITY);
            let mut off = 0;
            for (s, d) in parts {
                if let ConstraintSet::Box { lower: l, upper: u } = s {
                    lower.rows_mut(off, *d).copy_from(l);
                    upper.rows_mut(off, *d).copy_from(u);
                }
                off += d;
            }
            return ConstraintSet::Box { lower, upper };
        }
        let blocks: Vec<(Mat, Vector)> = parts.iter().map(|(s, d)| s.halfspaces(*d)).collect();
        let rows: usize = blocks.iter().map(|b| b.0.nrows()).sum();
        let mut g = Mat::zeros(rows, n);
        let mut h = Vector::zeros(rows);
        let (mut ro, mut co) = (0, 0);
        for ((bg, bh), (_, d)) in blocks.iter().zip(parts) {
            g.view_mut((ro, co), (bg.nrows(), *d)).copy_from(bg);
            h.rows_mut(ro, bh.len()).copy_from(bh);
            ro += bg.nrows();
            co += d;
        }
        ConstraintSet::Polytope { g, h }
    }

    fn to_config(&self) -> Option<ConstraintConfig> {
        match self {
            ConstraintSet::Unbounded => None,
            ConstraintSet::Box { lower, upper } => Some(ConstraintConfig::Box {
                lower: lower.iter().copied().collect(),
                upper: upper.iter().copied().collect(),
            }),
            ConstraintSet::Polytope { g, h } => {
                Some(ConstraintConfig::Polytope { g: to_rows(g), h: h.iter().copied().collect() })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Subsystem {
    /// Canonical (contiguous) state range.
    pub states: Range<usize>,
    /// Rows of C observed by this subsystem.
    pub outputs: Vec<usize>,
    /// Row range inside the stacked output y# = H y.
    pub rows: Range<usize>,
    pub a: Mat,
    pub c: Mat,
    /// Row block of Ã (n_i × n).
    pub a_tilde: Mat,
    /// Row block of C̃ (p_i × n).
    pub c_tilde: Mat,
    pub q: SpdMat,
    pub r: SpdMat,
    pub pi0: SpdMat,
    pub constraint: ConstraintSet,
    pub obs_index: usize,
    overrides: [Option<Matrix>; 3],
}

impl Subsystem {
    pub fn n(&self) -> usize {
        self.states.len()
    }
    pub fn p(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingGraph {
    /// Pairs (j, i): subsystem j influences subsystem i.
    pub edges: BTreeSet<(usize, usize)>,
    pub neighbors: Vec<Vec<usize>>,
    pub nu_x: Vec<usize>,
    pub nu_y: Vec<usize>,
    pub m_x: Vec<usize>,
    pub m_y: Vec<usize>,
    /// a_nz[i][j]: block A_ij is nonzero (i ≠ j).
    pub a_nz: Vec<Vec<bool>>,
    pub c_nz: Vec<Vec<bool>>,
}

impl CouplingGraph {
    pub fn is_complete(&self) -> bool {
        let m = self.neighbors.len();
        self.edges.len() == m * (m.saturating_sub(1))
    }
}

#[derive(Clone, Debug)]
pub struct PartitionedSystem {
    pub a: Mat,
    pub c: Mat,
    pub qo: SpdMat,
    pub ro: SpdMat,
    pub pi0: SpdMat,
    pub mx0: Vector,
    pub subsystems: Vec<Subsystem>,
    pub h: Mat,
    pub c_sharp: Mat,
    pub a_star: Mat,
    pub a_tilde: Mat,
    pub c_star: Mat,
    pub c_tilde: Mat,
    pub graph: CouplingGraph,
    /// canonical state k corresponds to user state permutation[k]
    pub permutation: Vec<usize>,
}

struct Parts {
    a: Mat,
    c: Mat,
    qo: SpdMat,
    ro: SpdMat,
    pi0: SpdMat,
    mx0: Vector,
    specs: Vec<Spec>,
    permutation: Vec<usize>,
}

struct Spec {
    states: Range<usize>,
    outputs: Vec<usize>,
    overrides: [Option<Matrix>; 3],
    constraint: ConstraintSet,
}

fn to_rows(m: &Mat) -> Matrix {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix(key: &str, rows: &Matrix, nrows: usize, ncols: usize) -> Result<Mat, ModelError> {
    if rows.len() != nrows {
        return Err(dim_err(key, format!("expected {nrows} rows, found {}", rows.len())));
    }
    for (r, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(dim_err(format!("{key}[{r}]"), format!("expected {ncols} columns, found {}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(dim_err(format!("{key}[{r}]"), "non-finite entry"));
        }
    }
    Ok(Mat::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

fn spd(key: &str, m: Mat) -> Result<SpdMat, ModelError> {
    SpdMat::new(m).map_err(|_| ModelError::NotPositiveDefinite { key: key.to_string() })
}

pub fn observability_matrix(a: &Mat, c: &Mat, horizon: usize) -> Mat {
    let n = a.ncols();
    let p = c.nrows();
    let mut out = Mat::zeros(p * horizon, n);
    let mut ca = c.clone();
    for k in 0..horizon {
        out.view_mut((k * p, 0), (p, n)).copy_from(&ca);
        ca = &ca * a;
    }
    out
}

/// Stack [C; CA; …; CA^{N−1}].
pub fn extended_observability(a: &Mat, c: &Mat, horizon: usize) -> Result<Mat, ModelError> {
    if !a.is_square() || c.ncols() != a.nrows() {
        return Err(ModelError::Linalg(LinalgError::DimensionMismatch {
            op: "extended_observability",
            detail: format!("A {:?}, C {:?}", a.shape(), c.shape()),
        }));
    }
    Ok(observability_matrix(a, c, horizon))
}

/// Smallest N ≤ n such that the N-step observability matrix has rank n.
pub fn observability_index(a: &Mat, c: &Mat) -> Result<usize, ModelError> {
    let n = a.nrows();
    for k in 1..=n.max(1) {
        if rank(&observability_matrix(a, c, k)) == n {
            return Ok(k);
        }
    }
    Err(ModelError::NotObservable)
}

pub fn build_partition(cfg: &SystemConfig) -> Result<PartitionedSystem, ModelError> {
    let n = cfg.a.len();
    let p = cfg.c.len();
    let a0 = matrix("a", &cfg.a, n, n)?;
    let c0 = matrix("c", &cfg.c, p, n)?;
    let q0 = matrix("q", &cfg.q, n, n)?;
    let r0 = matrix("r", &cfg.r, p, p)?;
    let pi00 = matrix("pi0", &cfg.pi0, n, n)?;
    if cfg.mx0.len() != n {
        return Err(dim_err("mx0", format!("expected length {n}")));
    }
    if cfg.subsystems.is_empty() {
        return Err(dim_err("subsystems", "at least one subsystem is required"));
    }
    let mut owner = vec![None; n];
    for (i, s) in cfg.subsystems.iter().enumerate() {
        if s.states.is_empty() {
            return Err(dim_err(format!("subsystems[{i}].states"), "empty"));
        }
        for &k in &s.states {
            if k >= n {
                return Err(dim_err(format!("subsystems[{i}].states"), format!("index {k} out of range")));
            }
            if owner[k].is_some() {
                return Err(ModelError::OverlappingStates { index: k });
            }
            owner[k] = Some(i);
        }
    }
    if let Some(k) = owner.iter().position(|o| o.is_none()) {
        return Err(ModelError::UncoveredStates { index: k });
    }
    let permutation: Vec<usize> = cfg.subsystems.iter().flat_map(|s| s.states.iter().copied()).collect();
    let perm = |m: &Mat| Mat::from_fn(n, n, |r, c| m[(permutation[r], permutation[c])]);
    let a = perm(&a0);
    let c = Mat::from_fn(p, n, |r, col| c0[(r, permutation[col])]);
    let qo = spd("q", perm(&q0))?;
    let pi0 = spd("pi0", perm(&pi00))?;
    let ro = spd("r", r0)?;
    let mx0 = Vector::from_fn(n, |k, _| cfg.mx0[permutation[k]]);

    let mut specs = Vec::new();
    let mut off = 0;
    for (i, s) in cfg.subsystems.iter().enumerate() {
        let ni = s.states.len();
        let key = |f: &str| format!("subsystems[{i}].{f}");
        if s.outputs.is_empty() {
            return Err(dim_err(key("outputs"), "empty"));
        }
        let mut seen = BTreeSet::new();
        for &o in &s.outputs {
            if o >= p {
                return Err(dim_err(key("outputs"), format!("row {o} out of range")));
            }
            if !seen.insert(o) {
                return Err(dim_err(key("outputs"), format!("row {o} listed twice")));
            }
        }
        let constraint = match &s.constraint {
            None | Some(ConstraintConfig::Unbounded) => ConstraintSet::Unbounded,
            Some(ConstraintConfig::Box { lower, upper }) => {
                if lower.len() != ni || upper.len() != ni {
                    return Err(dim_err(key("constraint"), format!("box bounds must have length {ni}")));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(ModelError::InvalidConstraint { subsystem: i, message: "lower > upper".into() });
                }
                ConstraintSet::Box { lower: Vector::from_vec(lower.clone()), upper: Vector::from_vec(upper.clone()) }
            }
            Some(ConstraintConfig::Polytope { g, h }) => {
                let gm = matrix(&key("constraint.g"), g, h.len(), ni)?;
                ConstraintSet::Polytope { g: gm, h: Vector::from_vec(h.clone()) }
            }
        };
        specs.push(Spec {
            states: off..off + ni,
            outputs: s.outputs.clone(),
            overrides: [s.q.clone(), s.r.clone(), s.pi0.clone()],
            constraint,
        });
        off += ni;
    }
    assemble(Parts { a, c, qo, ro, pi0, mx0, specs, permutation })
}

fn nonzero(m: &Mat) -> bool {
    m.nrows() > 0 && m.ncols() > 0 && m.amax() >= ZERO_BLOCK_TOL
}

fn assemble(parts: Parts) -> Result<PartitionedSystem, ModelError> {
    let Parts { a, c, qo, ro, pi0, mx0, specs, permutation } = parts;
    let n = a.nrows();
    let p = c.nrows();
    let pbar: usize = specs.iter().map(|s| s.outputs.len()).sum();
    let mut h = Mat::zeros(pbar, p);
    let mut row = 0;
    let mut row_ranges = Vec::new();
    for s in &specs {
        let start = row;
        for &o in &s.outputs {
            h[(row, o)] = 1.0;
            row += 1;
        }
        row_ranges.push(start..row);
    }
    for col in 0..p {
        if h.column(col).amax() == 0.0 {
            return Err(ModelError::RankDeficientH { row: col });
        }
    }
    let c_sharp = &h * &c;
    let r_sharp_full = symmetrize(&(&h * ro.mat() * h.transpose()));
    let mut a_star = Mat::zeros(n, n);
    let mut c_star = Mat::zeros(pbar, n);
    for (s, rr) in specs.iter().zip(&row_ranges) {
        let ni = s.states.len();
        a_star.view_mut((s.states.start, s.states.start), (ni, ni)).copy_from(&a.view((s.states.start, s.states.start), (ni, ni)));
        c_star.view_mut((rr.start, s.states.start), (rr.len(), ni)).copy_from(&c_sharp.view((rr.start, s.states.start), (rr.len(), ni)));
    }
    let a_tilde = &a - &a_star;
    let c_tilde = &c_sharp - &c_star;

    let mut subsystems = Vec::new();
    for (i, (s, rr)) in specs.into_iter().zip(row_ranges).enumerate() {
        let ni = s.states.len();
        let pi_ = rr.len();
        let st = s.states.clone();
        let key = |f: &str| format!("subsystems[{i}].{f}");
        let block = |m: &Mat, r: &Range<usize>| Mat::from(m.view((r.start, r.start), (r.len(), r.len())));
        let q = match &s.overrides[0] {
            Some(m) => spd(&key("q"), matrix(&key("q"), m, ni, ni)?)?,
            None => spd(&key("q"), block(qo.mat(), &st))?,
        };
        let r = match &s.overrides[1] {
            Some(m) => spd(&key("r"), matrix(&key("r"), m, pi_, pi_)?)?,
            None => spd(&key("r"), block(&r_sharp_full, &rr))?,
        };
        let pi0_i = match &s.overrides[2] {
            Some(m) => spd(&key("pi0"), matrix(&key("pi0"), m, ni, ni)?)?,
            None => spd(&key("pi0"), block(pi0.mat(), &st))?,
        };
        let ai = block(&a, &st);
        let ci = Mat::from(c_sharp.view((rr.start, st.start), (pi_, ni)));
        let obs_index = observability_index(&ai, &ci).map_err(|_| ModelError::NonObservablePair(i))?;
        if let ConstraintSet::Polytope { g, h } = &s.constraint {
            let mut qp = Qp::new(Mat::identity(ni, ni), Vector::zeros(ni), 0.0);
            qp.push_ineq(g, h);
            if qpsolve::solve(&qp).is_err() {
                return Err(ModelError::InvalidConstraint { subsystem: i, message: "polytope is empty".into() });
            }
        }
        subsystems.push(Subsystem {
            a: ai,
            c: ci,
            a_tilde: a_tilde.rows(st.start, ni).into(),
            c_tilde: c_tilde.rows(rr.start, pi_).into(),
            states: st,
            outputs: s.outputs,
            rows: rr,
            q,
            r,
            pi0: pi0_i,
            constraint: s.constraint,
            obs_index,
            overrides: s.overrides,
        });
    }
    let graph = coupling_graph(&subsystems);
    Ok(PartitionedSystem {
        a,
        c,
        qo,
        ro,
        pi0,
        mx0,
        subsystems,
        h,
        c_sharp,
        a_star,
        a_tilde,
        c_star,
        c_tilde,
        graph,
        permutation,
    })
}

fn coupling_graph(subs: &[Subsystem]) -> CouplingGraph {
    let m = subs.len();
    let mut a_nz = vec![vec![false; m]; m];
    let mut c_nz = vec![vec![false; m]; m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let sj = &subs[j].states;
            a_nz[i][j] = nonzero(&subs[i].a_tilde.columns(sj.start, sj.len()).into());
            c_nz[i][j] = nonzero(&subs[i].c_tilde.columns(sj.start, sj.len()).into());
        }
    }
    let mut edges = BTreeSet::new();
    let mut neighbors = vec![Vec::new(); m];
    for i in 0..m {
        for j in 0..m {
            if a_nz[i][j] || c_nz[i][j] {
                edges.insert((j, i));
                neighbors[i].push(j);
            }
        }
    }
    let count = |f: &dyn Fn(usize) -> bool| (0..m).filter(|&k| f(k)).count();
    let nu_x = (0..m).map(|i| count(&|j| j != i && a_nz[j][i])).collect();
    let nu_y = (0..m).map(|i| count(&|j| j != i && c_nz[j][i])).collect();
    let m_x = (0..m).map(|i| count(&|j| j != i && a_nz[i][j])).collect();
    let m_y = (0..m).map(|i| count(&|j| j != i && c_nz[i][j])).collect();
    CouplingGraph { edges, neighbors, nu_x, nu_y, m_x, m_y, a_nz, c_nz }
}

impl PartitionedSystem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    pub fn pbar(&self) -> usize {
        self.h.nrows()
    }
    pub fn m(&self) -> usize {
        self.subsystems.len()
    }

    /// Block A_ij: rows of subsystem i, columns of subsystem j.
    pub fn a_block(&self, i: usize, j: usize) -> Mat {
        let (si, sj) = (&self.subsystems[i].states, &self.subsystems[j].states);
        self.a.view((si.start, sj.start), (si.len(), sj.len())).into()
    }

    /// Block C_ij of C#: rows of subsystem i, columns of subsystem j (zero for i = j in C̃).
    pub fn c_tilde_block(&self, i: usize, j: usize) -> Mat {
        let sj = &self.subsystems[j].states;
        self.subsystems[i].c_tilde.columns(sj.start, sj.len()).into()
    }

    pub fn a_tilde_block(&self, i: usize, j: usize) -> Mat {
        let sj = &self.subsystems[j].states;
        self.subsystems[i].a_tilde.columns(sj.start, sj.len()).into()
    }

    /// max_i n°_i
    pub fn max_obs_index(&self) -> usize {
        self.subsystems.iter().map(|s| s.obs_index).max().unwrap_or(1)
    }

    pub fn check_horizon(&self, horizon: usize) -> Result<(), ModelError> {
        let required = self.max_obs_index();
        if horizon < required {
            return Err(ModelError::HorizonTooShort { horizon, required });
        }
        Ok(())
    }

    /// blockdiag(Q^{[1]}, …, Q^{[M]})
    pub fn q_blockdiag(&self) -> Mat {
        block_diag(&self.subsystems.iter().map(|s| s.q.mat().clone()).collect::<Vec<_>>())
    }

    /// blockdiag(R^{[1]}, …, R^{[M]})
    pub fn r_blockdiag(&self) -> Mat {
        block_diag(&self.subsystems.iter().map(|s| s.r.mat().clone()).collect::<Vec<_>>())
    }

    pub fn constraint_product(&self) -> ConstraintSet {
        ConstraintSet::product(&self.subsystems.iter().map(|s| (s.constraint.clone(), s.n())).collect::<Vec<_>>())
    }

    /// The same collective system with a single subsystem (M = 1).
    pub fn trivial(&self) -> Result<PartitionedSystem, ModelError> {
        let n = self.n();
        let p = self.p();
        assemble(Parts {
            a: self.a.clone(),
            c: self.c.clone(),
            qo: self.qo.clone(),
            ro: self.ro.clone(),
            pi0: self.pi0.clone(),
            mx0: self.mx0.clone(),
            specs: vec![Spec {
                states: 0..n,
                outputs: (0..p).collect(),
                overrides: [None, None, None],
                constraint: self.constraint_product(),
            }],
            permutation: (0..n).collect(),
        })
        .map_err(|e| match e {
            ModelError::NonObservablePair(_) => ModelError::NotObservable,
            other => other,
        })
    }

    /// Canonical configuration (states renumbered contiguously).
    pub fn to_config(&self) -> SystemConfig {
        SystemConfig {
            a: to_rows(&self.a),
            c: to_rows(&self.c),
            q: to_rows(self.qo.mat()),
            r: to_rows(self.ro.mat()),
            pi0: to_rows(self.pi0.mat()),
            mx0: self.mx0.iter().copied().collect(),
            subsystems: self
                .subsystems
                .iter()
                .map(|s| SubsystemConfig {
                    states: s.states.clone().collect(),
                    outputs: s.outputs.clone(),
                    q: s.overrides[0].clone(),
                    r: s.overrides[1].clone(),
                    pi0: s.overrides[2].clone(),
                    constraint: s.constraint.to_config(),
                })
                .collect(),
        }
    }

    /// Map a state vector from user ordering to canonical ordering.
    pub fn to_canonical(&self, x: &Vector) -> Vector {
        Vector::from_fn(self.n(), |k, _| x[self.permutation[k]])
    }

    /// Collective N-step observability matrix of (A, C#), time-major rows.
    pub fn observability_collective(&self, horizon: usize) -> Mat {
        observability_matrix(&self.a, &self.c_sharp, horizon)
    }

    /// Observability matrix of (A*, C*), time-major rows; a row permutation of blockdiag(O^{[i]}_N).
    pub fn observability_star(&self, horizon: usize) -> Mat {
        observability_matrix(&self.a_star, &self.c_star, horizon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub horizon: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub delta_f: f64,
    pub kappa: f64,
    pub kappa_star: f64,
    pub nu: f64,
    pub a0: f64,
}

pub fn partition_quality(sys: &PartitionedSystem, horizon: usize) -> Result<QualityReport, ModelError> {
    sys.check_horizon(horizon)?;
    let ostar = sys.observability_star(horizon);
    let o = sys.observability_collective(horizon);
    let (f_min, f_max) = singular_extremes(&ostar)?;
    let delta_f = norm2(&(&ostar - &o));
    let kappa = norm2(&sys.a);
    let kappa_star = norm2(&sys.a_star);
    let nu = f_max * delta_f / (f_min * f_min);
    Ok(QualityReport { horizon, f_min, f_max, delta_f, kappa, kappa_star, nu, a0: nu * kappa })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MuInterval {
    Empty,
    /// [lo, hi]; hi = None means unbounded above.
    Range { lo: f64, hi: Option<f64> },
}

impl MuInterval {
    pub fn contains(&self, mu: f64) -> bool {
        match self {
            MuInterval::Empty => false,
            MuInterval::Range { lo, hi } => mu >= *lo && hi.is_none_or(|h| mu <= h),
        }
    }
}

pub fn mu_interval(q: &QualityReport) -> MuInterval {
    let (ks, fm, df) = (q.kappa_star, q.f_min, q.delta_f);
    if ks < 1.0 {
        let mu_min = (df * df - fm * fm) / (1.0 - ks);
        MuInterval::Range { lo: mu_min.max(0.0), hi: None }
    } else {
        let num = fm * fm - df * df;
        if num < 0.0 {
            return MuInterval::Empty;
        }
        let den = ks * ks - 1.0;
        if den == 0.0 {
            MuInterval::Range { lo: 0.0, hi: None }
        } else {
            MuInterval::Range { lo: 0.0, hi: Some(num / den) }
        }
    }
}

/// Powers A^0..A^{k} of a square matrix.
pub fn powers(a: &Mat, k: usize) -> Vec<Mat> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(Mat::identity(a.nrows(), a.ncols()));
    for j in 1..=k {
        let next = &out[j - 1] * a;
        out.push(next);
    }
    out
}
