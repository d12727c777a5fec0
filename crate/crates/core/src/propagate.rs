//! Time evolution.
//!
//! The exact engine evolves the state, `ψ(t) = e^{-iHt} ψ0`, and reads off
//! expectation values; it works on any basis of the model, in practice the
//! conserved `(M1, M2)` sector of the initial number state. The Heisenberg
//! oracle integrates the interaction-picture operator equations for
//! `σ_j = s_j e^{iω_j^s t}`, `θ_j = c_j e^{iω_j^c t}` with the information
//! modes replaced by their damped free evolution, using classical RK4.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fock::{
    Basis, FockError, Ladder, LayoutSpec, ModeLayout, Monomial, OperatorSum, SparseOperator,
    StateVector, C64, DEFAULT_MAX_DIMENSION, I, ONE, ZERO,
};
use crate::model::{InitialOccupations, ModelError, ModelOperators, ModelParams, TraderIndices};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagateError {
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sector (m1={m1}, m2={m2}) is empty for this layout")]
    EmptySector { m1: u32, m2: u32 },
    #[error("sector dimension {dim} exceeds the configured maximum {max}")]
    SectorTooLarge { dim: usize, max: u128 },
    #[error("initial state has weight {deficit:e} outside the sector")]
    OutsideSector { deficit: f64 },
    #[error("truncation leakage {leakage:e} exceeds threshold {threshold:e} at t = {time}")]
    LeakageExceeded {
        time: f64,
        leakage: f64,
        threshold: f64,
    },
    #[error("state norm drifted by {drift:e} at t = {time} (tolerance {tol:e})")]
    NormDrift { time: f64, drift: f64, tol: f64 },
    #[error("time grid must start at 0 and increase strictly")]
    BadTimeGrid,
    #[error("ODE step {step} too large: observables move by {drift:e} under step halving (tolerance {tol:e}); refine the step")]
    StepTooLarge { step: f64, drift: f64, tol: f64 },
    #[error("ODE step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Exact,
    #[serde(rename = "ode")]
    HeisenbergOde,
    #[serde(rename = "perturb")]
    Perturbative,
}

impl Engine {
    pub fn label(self) -> &'static str {
        match self {
            Engine::Exact => "exact",
            Engine::HeisenbergOde => "ode",
            Engine::Perturbative => "perturb",
        }
    }
}

/// Expectation values at one time. Index 0 is trader 1. Quantities an engine
/// does not resolve are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub shares: [f64; 2],
    pub cash: [f64; 2],
    pub info: [f64; 2],
    pub portfolio: [f64; 2],
    pub conserved: Option<[f64; 2]>,
    pub leakage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub engine: Engine,
    pub times: Vec<f64>,
    pub records: Vec<Record>,
}

impl TimeSeries {
    pub fn column<F: Fn(&Record) -> f64>(&self, f: F) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }

    /// `max_t |f(t) − f(0)|`.
    pub fn max_drift<F: Fn(&Record) -> f64>(&self, f: F) -> f64 {
        let v = self.column(f);
        v.iter().map(|x| (x - v[0]).abs()).fold(0.0, f64::max)
    }

    pub fn max_leakage(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.leakage)
            .try_fold(0.0f64, |acc, l| l.map(|l| acc.max(l)))
    }
}

pub(crate) fn check_time_grid(times: &[f64]) -> Result<(), PropagateError> {
    if times.is_empty() || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PropagateError::BadTimeGrid);
    }
    Ok(())
}

/// Joint eigenspace of `M1`, `M2` with eigenvalues `m`.
#[derive(Clone, Debug)]
pub struct Sector {
    pub m: [u32; 2],
    pub basis: Basis,
}

impl Sector {
    pub fn enumerate(layout: &ModeLayout, m: [u32; 2]) -> Result<Self, PropagateError> {
        Self::enumerate_with_limit(layout, m, DEFAULT_MAX_DIMENSION)
    }

    pub fn enumerate_with_limit(
        layout: &ModeLayout,
        m: [u32; 2],
        max_dim: u128,
    ) -> Result<Self, PropagateError> {
        let parts: Vec<Vec<u128>> = (0..2)
            .map(|j| {
                let modes = layout.trader_modes(j as u8 + 1);
                let mut out = Vec::new();
                compositions(layout, &modes, 0, m[j], 0, &mut out);
                out
            })
            .collect();
        let dim = parts[0].len() as u128 * parts[1].len() as u128;
        if dim == 0 {
            return Err(PropagateError::EmptySector { m1: m[0], m2: m[1] });
        }
        if dim > max_dim {
            return Err(PropagateError::SectorTooLarge {
                dim: dim.min(usize::MAX as u128) as usize,
                max: max_dim,
            });
        }
        let mut flats = Vec::with_capacity(dim as usize);
        for a in &parts[0] {
            for b in &parts[1] {
                flats.push(a + b);
            }
        }
        Ok(Self {
            m,
            basis: Basis::subset(layout, flats),
        })
    }

    /// The sector holding the number state with the given trader occupations.
    pub fn of_initial(layout: &ModeLayout, init: &InitialOccupations) -> Result<Self, PropagateError> {
        layout.occupation_vector(&init.mode_list())?;
        Self::enumerate(layout, init.conserved())
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }
}

/// Partial flat indices of all occupations of `modes[i..]` summing to `left`.
fn compositions(layout: &ModeLayout, modes: &[usize], i: usize, left: u32, acc: u128, out: &mut Vec<u128>) {
    if i == modes.len() {
        if left == 0 {
            out.push(acc);
        }
        return;
    }
    let m = modes[i];
    let cap = layout.cutoffs()[m].min(left);
    for n in 0..=cap {
        compositions(layout, modes, i + 1, left - n, acc + n as u128 * layout.stride(m), out);
    }
}

/// Projects every operator of `ops` onto `sector`.
pub fn restrict_to_sector(ops: &ModelOperators, sector: &Sector) -> Result<ModelOperators, PropagateError> {
    let positions = sector.basis.positions_in(&ops.basis)?;
    Ok(ops.restrict(&sector.basis, &positions))
}

/// Components of `psi` (over `outer`) inside `sector`; fails when weight
/// outside the sector exceeds `1e-12`.
pub fn restrict_state(outer: &Basis, sector: &Sector, psi: &StateVector) -> Result<StateVector, PropagateError> {
    let positions = sector.basis.positions_in(outer)?;
    let inner = psi.restrict(&positions);
    let deficit = psi.norm().powi(2) - inner.norm().powi(2);
    if deficit > 1e-12 {
        return Err(PropagateError::OutsideSector { deficit });
    }
    Ok(inner)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Spectral for small bases, Krylov above [`SPECTRAL_MAX_DIM`].
    Auto,
    Spectral,
    Krylov,
}

pub const SPECTRAL_MAX_DIM: usize = 1500;

#[derive(Clone, Debug, PartialEq)]
pub struct EvolveOptions {
    pub tol: f64,
    pub leakage_threshold: f64,
    pub leakage_warning: f64,
    pub method: Method,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            leakage_threshold: 1e-6,
            leakage_warning: 1e-9,
            method: Method::Auto,
        }
    }
}

pub fn to_dense(op: &SparseOperator) -> DMatrix<C64> {
    let mut m = DMatrix::from_element(op.dim(), op.dim(), ZERO);
    for (r, c, v) in op.entries() {
        m[(r, c)] = v;
    }
    m
}

/// `e^{-iHt}` via a full Hermitian eigendecomposition.
pub struct SpectralPropagator {
    energies: Vec<f64>,
    vectors: DMatrix<C64>,
}

impl SpectralPropagator {
    pub fn new(h: &SparseOperator) -> Self {
        let eig = SymmetricEigen::new(to_dense(h));
        Self {
            energies: eig.eigenvalues.iter().copied().collect(),
            vectors: eig.eigenvectors,
        }
    }

    pub fn evolve(&self, psi: &StateVector, t: f64) -> StateVector {
        if t == 0.0 {
            return psi.clone();
        }
        let v = DVector::from_column_slice(&psi.amplitudes);
        let mut coeffs = self.vectors.ad_mul(&v);
        for (c, e) in coeffs.iter_mut().zip(&self.energies) {
            *c *= C64::from_polar(1.0, -e * t);
        }
        StateVector::new((&self.vectors * coeffs).iter().copied().collect())
    }
}

/// Short-iterate Lanczos propagator for Hermitian `H`.
pub struct KrylovPropagator<'a> {
    h: &'a SparseOperator,
    tol: f64,
    max_krylov: usize,
}

impl<'a> KrylovPropagator<'a> {
    pub fn new(h: &'a SparseOperator, tol: f64) -> Self {
        Self {
            h,
            tol,
            max_krylov: 40,
        }
    }

    /// `e^{-iHt} psi`; `t` may be negative.
    pub fn evolve(&self, psi: &StateVector, t: f64) -> StateVector {
        let mut v = psi.amplitudes.clone();
        let mut done = 0.0f64;
        let total = t.abs();
        let sign = t.signum();
        while done < total {
            let remaining = total - done;
            let (basis, alpha, beta) = self.lanczos(&v);
            let m = alpha.len();
            let norm0 = vec_norm(&v);
            let mut tau = remaining;
            let local_tol = 0.1 * self.tol;
            let coeffs = loop {
                let c = tridiagonal_exp(&alpha, &beta, sign * tau);
                // A breakdown (zero trailing beta) makes the subspace invariant.
                let est = if beta.len() < m { 0.0 } else { norm0 * beta[m - 1] * c[m - 1].norm() };
                if est <= local_tol || tau < 1e-12 * total.max(1.0) {
                    break c;
                }
                tau *= 0.5;
            };
            let mut next = vec![ZERO; v.len()];
            for (k, q) in basis.iter().enumerate() {
                let ck = coeffs[k] * norm0;
                for (o, x) in next.iter_mut().zip(q) {
                    *o += ck * x;
                }
            }
            v = next;
            done += tau;
        }
        StateVector::new(v)
    }

    /// Orthonormal Krylov vectors with the tridiagonal coefficients. `beta`
    /// has `alpha.len()` entries unless the recursion broke down early.
    fn lanczos(&self, v0: &[C64]) -> (Vec<Vec<C64>>, Vec<f64>, Vec<f64>) {
        let n = v0.len();
        let norm = vec_norm(v0);
        let mut basis: Vec<Vec<C64>> = vec![v0.iter().map(|x| x / norm).collect()];
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        let m = self.max_krylov.min(n);
        let mut w = vec![ZERO; n];
        for j in 0..m {
            self.h.apply_into(&basis[j], &mut w);
            let a: C64 = basis[j].iter().zip(&w).map(|(q, x)| q.conj() * x).sum();
            alpha.push(a.re);
            // Full reorthogonalization against the whole basis.
            for q in &basis {
                let proj: C64 = q.iter().zip(&w).map(|(q, x)| q.conj() * x).sum();
                for (x, qq) in w.iter_mut().zip(q) {
                    *x -= proj * qq;
                }
            }
            let b = vec_norm(&w);
            if b < 1e-13 {
                break;
            }
            beta.push(b);
            if j + 1 == m {
                break;
            }
            basis.push(w.iter().map(|x| x / b).collect());
        }
        basis.truncate(alpha.len());
        (basis, alpha, beta)
    }
}

fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `e^{-iτT} e_1` for the real symmetric tridiagonal `T(alpha, beta)`.
fn tridiagonal_exp(alpha: &[f64], beta: &[f64], tau: f64) -> Vec<C64> {
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut out = vec![ZERO; m];
    for k in 0..m {
        let phase = C64::from_polar(eig.eigenvectors[(0, k)], -eig.eigenvalues[k] * tau);
        for i in 0..m {
            out[i] += phase * eig.eigenvectors[(i, k)];
        }
    }
    out
}

fn record_of(ops: &ModelOperators, psi: &StateVector) -> Record {
    let x = &psi.amplitudes;
    let ev = |op: &SparseOperator| op.expectation_raw(x).re;
    let pair = |ops: &[SparseOperator; 2]| [ev(&ops[0]), ev(&ops[1])];
    let leakage = ops
        .boundary
        .iter()
        .zip(x)
        .filter(|(b, _)| **b)
        .map(|(_, a)| a.norm_sqr())
        .fold(0.0, |acc, p| acc + p)
        .min(1.0);
    Record {
        shares: pair(&ops.s),
        cash: pair(&ops.k),
        info: pair(&ops.info),
        portfolio: pair(&ops.pi),
        conserved: Some(pair(&ops.m)),
        leakage: Some(leakage),
    }
}

/// States `e^{-iHt} ψ0` at every requested time.
pub fn propagate_states(
    h: &SparseOperator,
    psi0: &StateVector,
    times: &[f64],
    method: Method,
    tol: f64,
) -> Vec<StateVector> {
    let spectral = match method {
        Method::Spectral => true,
        Method::Krylov => false,
        Method::Auto => h.dim() <= SPECTRAL_MAX_DIM,
    };
    if spectral {
        let prop = SpectralPropagator::new(h);
        times.iter().map(|&t| prop.evolve(psi0, t)).collect()
    } else {
        let prop = KrylovPropagator::new(h, tol);
        let mut out = Vec::with_capacity(times.len());
        let mut psi = psi0.clone();
        let mut last = 0.0;
        for &t in times {
            psi = prop.evolve(&psi, t - last);
            last = t;
            out.push(psi.clone());
        }
        out
    }
}

/// Exact evolution of `psi0` under `ops.h`, reporting every bundle
/// observable and the truncation leakage.
pub fn evolve_exact(
    ops: &ModelOperators,
    psi0: &StateVector,
    times: &[f64],
    opts: &EvolveOptions,
) -> Result<TimeSeries, PropagateError> {
    check_time_grid(times)?;
    if psi0.dim() != ops.dim() {
        return Err(FockError::DimensionMismatch {
            left: ops.dim(),
            right: psi0.dim(),
        }
        .into());
    }
    psi0.check_normalized(1e-10)?;
    let states = propagate_states(&ops.h, psi0, times, opts.method, opts.tol);
    let mut records = Vec::with_capacity(times.len());
    for (&t, psi) in times.iter().zip(&states) {
        let drift = (psi.norm() - 1.0).abs();
        if drift > opts.tol {
            return Err(PropagateError::NormDrift {
                time: t,
                drift,
                tol: opts.tol,
            });
        }
        let rec = record_of(ops, psi);
        let leak = rec.leakage.unwrap_or(0.0);
        if leak > opts.leakage_threshold {
            return Err(PropagateError::LeakageExceeded {
                time: t,
                leakage: leak,
                threshold: opts.leakage_threshold,
            });
        }
        if leak > opts.leakage_warning {
            log::warn!("truncation leakage {leak:e} at t = {t}");
        }
        records.push(rec);
    }
    Ok(TimeSeries {
        engine: Engine::Exact,
        times: times.to_vec(),
        records,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeOptions {
    /// Nominal RK4 step; each output interval is split into equal steps no
    /// longer than this.
    pub step: f64,
    /// Largest tolerated observable change under step halving.
    pub tol: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { step: 0.05, tol: 1e-8 }
    }
}

type SectorKey = (u32, u32);

fn shifted(k: SectorKey, s: (i32, i32)) -> Option<SectorKey> {
    let a = k.0 as i64 + s.0 as i64;
    let b = k.1 as i64 + s.1 as i64;
    (a >= 0 && b >= 0).then_some((a as u32, b as u32))
}

/// Trader-only basis grouped by `(m1, m2)`.
struct SectorIndex {
    members: BTreeMap<SectorKey, Vec<usize>>,
    key: Vec<SectorKey>,
    local: Vec<usize>,
}

impl SectorIndex {
    fn new(basis: &Basis, t: &TraderIndices) -> Self {
        let mut members: BTreeMap<SectorKey, Vec<usize>> = BTreeMap::new();
        let mut key = Vec::with_capacity(basis.dim());
        let mut local = Vec::with_capacity(basis.dim());
        for p in 0..basis.dim() {
            let o = basis.occupations(p);
            let k = (o[t.s[0]] + o[t.c[0]] + o[t.i[0]], o[t.s[1]] + o[t.c[1]] + o[t.i[1]]);
            let list = members.entry(k).or_default();
            local.push(list.len());
            list.push(p);
            key.push(k);
        }
        Self { members, key, local }
    }

    fn size(&self, k: SectorKey) -> Option<usize> {
        self.members.get(&k).map(|v| v.len())
    }
}

/// Operator that maps sector `k` into sector `k + shift`, stored as dense
/// blocks keyed by source sector.
#[derive(Clone, Debug)]
struct BlockOp {
    shift: (i32, i32),
    blocks: BTreeMap<SectorKey, Array2<C64>>,
}

impl BlockOp {
    fn from_sparse(op: &SparseOperator, shift: (i32, i32), idx: &SectorIndex) -> Self {
        let mut blocks = BTreeMap::new();
        for (&src, cols) in &idx.members {
            let Some(dst) = shifted(src, shift) else { continue };
            let Some(rows) = idx.size(dst) else { continue };
            blocks.insert(src, Array2::from_elem((rows, cols.len()), ZERO));
        }
        for (r, c, v) in op.entries() {
            let (src, dst) = (idx.key[c], idx.key[r]);
            assert_eq!(shifted(src, shift), Some(dst), "operator does not carry shift {shift:?}");
            blocks.get_mut(&src).expect("block allocated")[[idx.local[r], idx.local[c]]] = v;
        }
        Self { shift, blocks }
    }

    fn mul(&self, rhs: &BlockOp) -> BlockOp {
        let mut blocks = BTreeMap::new();
        for (&src, b) in &rhs.blocks {
            let mid = shifted(src, rhs.shift).expect("valid block");
            if let Some(a) = self.blocks.get(&mid) {
                blocks.insert(src, a.dot(b));
            }
        }
        BlockOp {
            shift: (self.shift.0 + rhs.shift.0, self.shift.1 + rhs.shift.1),
            blocks,
        }
    }

    fn adjoint(&self) -> BlockOp {
        let mut blocks = BTreeMap::new();
        for (&src, b) in &self.blocks {
            let dst = shifted(src, self.shift).expect("valid block");
            blocks.insert(dst, b.t().mapv(|z| z.conj()));
        }
        BlockOp {
            shift: (-self.shift.0, -self.shift.1),
            blocks,
        }
    }

    /// `self += a · other` (same shift).
    fn axpy(&mut self, a: C64, other: &BlockOp) {
        debug_assert_eq!(self.shift, other.shift);
        for (k, b) in &other.blocks {
            match self.blocks.get_mut(k) {
                Some(x) => x.scaled_add(a, b),
                None => {
                    self.blocks.insert(*k, b.mapv(|z| a * z));
                }
            }
        }
    }

    fn scaled(&self, a: C64) -> BlockOp {
        BlockOp {
            shift: self.shift,
            blocks: self.blocks.iter().map(|(k, b)| (*k, b.mapv(|z| a * z))).collect(),
        }
    }

    /// `‖A e_col‖²` for the basis vector `col` of sector `src`.
    fn column_norm_sqr(&self, src: SectorKey, col: usize) -> f64 {
        self.blocks
            .get(&src)
            .map(|b| b.column(col).iter().map(|z| z.norm_sqr()).sum())
            .unwrap_or(0.0)
    }
}

struct HeisenbergSystem {
    lambda: f64,
    lambda_inf: f64,
    omega_hat: f64,
    omega_s: [f64; 2],
    omega_c: [f64; 2],
    omega: [f64; 2],
    decay: [f64; 2],
    forcing: [BlockOp; 2],
}

impl HeisenbergSystem {
    /// Right-hand sides for `(σ1, σ2, θ1, θ2)`, products ordered as
    /// `σ2 θ1 θ2†`, `σ1 θ1† θ2`, `σ1 σ2† θ2`, `σ1† σ2 θ1`.
    fn rhs(&self, t: f64, y: &[BlockOp; 4]) -> [BlockOp; 4] {
        let [s1, s2, t1, t2] = y;
        let e = C64::from_polar(1.0, self.omega_hat * t);
        let coupling = -I * self.lambda;
        let info = [0, 1].map(|j| C64::new(-self.decay[j] * t, -self.omega[j] * t).exp());

        let mut ds1 = s2.mul(t1).mul(&t2.adjoint()).scaled(coupling * e);
        let mut ds2 = s1.mul(&t1.adjoint()).mul(t2).scaled(coupling * e.conj());
        let mut dt1 = s1.mul(&s2.adjoint()).mul(t2).scaled(coupling * e.conj());
        let mut dt2 = s1.adjoint().mul(s2).mul(t1).scaled(coupling * e);

        let drive = |j: usize, w: f64| -I * self.lambda_inf * info[j] * C64::from_polar(1.0, w * t);
        ds1.axpy(drive(0, self.omega_s[0]), &self.forcing[0]);
        ds2.axpy(drive(1, self.omega_s[1]), &self.forcing[1]);
        dt1.axpy(drive(0, self.omega_c[0]), &self.forcing[0]);
        dt2.axpy(drive(1, self.omega_c[1]), &self.forcing[1]);
        [ds1, ds2, dt1, dt2]
    }

    fn rk4_step(&self, t: f64, h: f64, y: &[BlockOp; 4]) -> [BlockOp; 4] {
        let stage = |base: &[BlockOp; 4], k: &[BlockOp; 4], a: f64| -> [BlockOp; 4] {
            [0, 1, 2, 3].map(|i| {
                let mut x = base[i].clone();
                x.axpy(C64::new(a, 0.0), &k[i]);
                x
            })
        };
        let k1 = self.rhs(t, y);
        let k2 = self.rhs(t + 0.5 * h, &stage(y, &k1, 0.5 * h));
        let k3 = self.rhs(t + 0.5 * h, &stage(y, &k2, 0.5 * h));
        let k4 = self.rhs(t + h, &stage(y, &k3, h));
        [0, 1, 2, 3].map(|i| {
            let mut x = y[i].clone();
            x.axpy(C64::new(h / 6.0, 0.0), &k1[i]);
            x.axpy(C64::new(h / 3.0, 0.0), &k2[i]);
            x.axpy(C64::new(h / 3.0, 0.0), &k3[i]);
            x.axpy(C64::new(h / 6.0, 0.0), &k4[i]);
            x
        })
    }
}

/// Integrates the interaction-picture Heisenberg equations on the trader
/// modes of `layout` (reservoir modes, if any, are eliminated through the
/// damping of `i_j`) and returns `n_j(t) = ⟨σ_j†σ_j⟩`, `k_j(t) = ⟨θ_j†θ_j⟩`
/// in the initial number state. The result at step `step/2` is returned after
/// checking it against the run at `step`.
pub fn integrate_heisenberg(
    layout: &ModeLayout,
    params: &ModelParams,
    init: &InitialOccupations,
    times: &[f64],
    opts: &OdeOptions,
) -> Result<TimeSeries, PropagateError> {
    integrate_heisenberg_with_drift(layout, params, init, times, opts).map(|(ts, _)| ts)
}

/// As [`integrate_heisenberg`], also returning the largest observable change
/// between the `step` and `step/2` runs (an upper bound, roughly 15×, on the
/// error of the returned series).
pub fn integrate_heisenberg_with_drift(
    layout: &ModeLayout,
    params: &ModelParams,
    init: &InitialOccupations,
    times: &[f64],
    opts: &OdeOptions,
) -> Result<(TimeSeries, f64), PropagateError> {
    check_time_grid(times)?;
    if !(opts.step > 0.0) || !opts.step.is_finite() {
        return Err(PropagateError::BadStep(opts.step));
    }
    let t_idx = TraderIndices::of(layout)?;
    let cut = |i: usize| layout.cutoffs()[i];
    let trader_cutoffs = [
        cut(t_idx.s[0]),
        cut(t_idx.s[1]),
        cut(t_idx.c[0]),
        cut(t_idx.c[1]),
        cut(t_idx.i[0]),
        cut(t_idx.i[1]),
    ];
    let trader_layout = LayoutSpec::new(trader_cutoffs, 0, 1).build()?;
    let basis = Basis::full(&trader_layout)?;
    let ti = TraderIndices::of(&trader_layout)?;
    let occ = trader_layout.occupation_vector(&init.mode_list())?;
    let phi = basis.position(trader_layout.flat_index(&occ)).expect("full basis");

    let mut decay = [0.0; 2];
    for j in 0..2 {
        if params.gamma[j] != 0.0 {
            decay[j] = params.damping_rate(j)?;
        }
    }

    let idx = SectorIndex::new(&basis, &ti);
    let ladder = |m: usize, shift: (i32, i32)| {
        let mut sum = OperatorSum::new();
        sum.push(ONE, Monomial(vec![Ladder::Lower(m)]));
        BlockOp::from_sparse(&basis.materialize(&sum), shift, &idx)
    };
    let y0 = [
        ladder(ti.s[0], (-1, 0)),
        ladder(ti.s[1], (0, -1)),
        ladder(ti.c[0], (-1, 0)),
        ladder(ti.c[1], (0, -1)),
    ];
    let system = HeisenbergSystem {
        lambda: params.lambda,
        lambda_inf: params.lambda_inf,
        omega_hat: params.omega_hat(),
        omega_s: params.omega_s,
        omega_c: params.omega_c,
        omega: params.omega,
        decay,
        forcing: [ladder(ti.i[0], (-1, 0)), ladder(ti.i[1], (0, -1))],
    };

    let src = idx.key[phi];
    let col = idx.local[phi];
    let observe = |t: f64, y: &[BlockOp; 4]| {
        let shares = [y[0].column_norm_sqr(src, col), y[1].column_norm_sqr(src, col)];
        let cash = [y[2].column_norm_sqr(src, col), y[3].column_norm_sqr(src, col)];
        let info = [0, 1].map(|j| init.i[j] as f64 * (-2.0 * decay[j] * t).exp());
        Record {
            shares,
            cash,
            info,
            portfolio: [shares[0] + cash[0], shares[1] + cash[1]],
            conserved: None,
            leakage: None,
        }
    };

    let run = |step: f64| -> Vec<Record> {
        let mut y = y0.clone();
        let mut out = vec![observe(0.0, &y)];
        for w in times.windows(2) {
            let span = w[1] - w[0];
            let n = (span / step - 1e-9).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for s in 0..n {
                y = system.rk4_step(w[0] + s as f64 * h, h, &y);
            }
            out.push(observe(w[1], &y));
        }
        out
    };

    let coarse = run(opts.step);
    let fine = run(0.5 * opts.step);
    let drift = coarse
        .iter()
        .zip(&fine)
        .flat_map(|(a, b)| {
            (0..2).flat_map(move |j| [(a.shares[j] - b.shares[j]).abs(), (a.cash[j] - b.cash[j]).abs()])
        })
        .fold(0.0, f64::max);
    if drift > opts.tol {
        return Err(PropagateError::StepTooLarge {
            step: opts.step,
            drift,
            tol: opts.tol,
        });
    }
    Ok((
        TimeSeries {
            engine: Engine::HeisenbergOde,
            times: times.to_vec(),
            records: fine,
        },
        drift,
    ))
}
