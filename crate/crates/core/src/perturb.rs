//! Closed-form second-order perturbation theory in `λ = λ_inf`.
//!
//! Everything here is evaluated in the interaction picture with the
//! information modes replaced by `i_j(t) = e^{-(iΩ_j + κ_j)t} i_j(0)`,
//! `κ_j = πγ_j²/Ω_j^(r)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fock::{Action, Basis, FockError, Ladder, ModeLayout, Monomial, OperatorSum, SparseOperator, C64, I, ONE, ZERO};
use crate::model::{InitialOccupations, ModelError, ModelParams, TraderIndices};
use crate::propagate::{check_time_grid, Engine, PropagateError, Record, TimeSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error("interaction detuning ω̂ = ω1^s − ω2^s − ω1^c + ω2^c is zero; the closed forms require ω̂ ≠ 0")]
    ZeroDetuning,
    #[error("the closed forms assume λ = λ_inf, got λ = {lambda}, λ_inf = {lambda_inf}")]
    CouplingMismatch { lambda: f64, lambda_inf: f64 },
    #[error("reservoir dispersion Ω_{0}^(r) is zero; the damping rate πγ²/Ω^(r) is undefined")]
    ZeroDispersion(u8),
    #[error("asymptotic value undefined for trader {0}: decay rate πγ²/Ω^(r) is not positive")]
    NoDecay(u8),
    #[error("cutoff of mode {mode} too small for the second-order monomials on the initial state")]
    CutoffTooSmall { mode: String },
    #[error("adaptive quadrature did not reach tolerance {tol:e} on [{a}, {b}] (estimate {error:e})")]
    Quadrature { a: f64, b: f64, tol: f64, error: f64 },
    #[error(transparent)]
    Propagate(#[from] PropagateError),
}

/// Parameters and initial occupations satisfying the closed forms'
/// preconditions.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbInputs {
    params: ModelParams,
    init: InitialOccupations,
}

impl PerturbInputs {
    pub fn new(params: ModelParams, init: InitialOccupations) -> Result<Self, PerturbError> {
        params.validate()?;
        if params.omega_hat() == 0.0 {
            return Err(PerturbError::ZeroDetuning);
        }
        if params.lambda != params.lambda_inf {
            return Err(PerturbError::CouplingMismatch {
                lambda: params.lambda,
                lambda_inf: params.lambda_inf,
            });
        }
        for j in 0..2 {
            if params.omega_r[j] == 0.0 {
                return Err(PerturbError::ZeroDispersion(j as u8 + 1));
            }
        }
        Ok(Self { params, init })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn init(&self) -> &InitialOccupations {
        &self.init
    }

    pub fn decay_rates(&self) -> [f64; 2] {
        decay_rates(&self.params).expect("checked at construction")
    }
}

fn decay_rates(params: &ModelParams) -> Result<[f64; 2], PerturbError> {
    let mut out = [0.0; 2];
    for (j, k) in out.iter_mut().enumerate() {
        *k = params
            .damping_rate(j)
            .map_err(|_| PerturbError::ZeroDispersion(j as u8 + 1))?;
    }
    Ok(out)
}

/// Time-dependent scalars of the second-order solution. Arrays are indexed
/// by trader, so `eta_s[0]` is `η_3^s` and `eta_s[1]` is `η_4^s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernels {
    pub eta1: C64,
    pub eta2: C64,
    pub eta_s: [C64; 2],
    pub eta_c: [C64; 2],
    pub ik_coeff: [C64; 2],
}

/// `(e^{w} − 1)` accurate for small `|w|`.
fn expm1(w: C64) -> C64 {
    if w.norm() < 1e-3 {
        let mut term = w;
        let mut sum = w;
        for k in 2..8 {
            term *= w / k as f64;
            sum += term;
        }
        sum
    } else {
        w.exp() - ONE
    }
}

/// `∫_0^t e^{z t1} dt1`.
fn exp_integral(z: C64, t: f64) -> C64 {
    if z == ZERO {
        C64::new(t, 0.0)
    } else {
        expm1(z * t) / z
    }
}

/// Exponent `i(ω − Ω_j) − κ_j` of `η^{s,c}` for trader `j` (0-based).
fn eta_exponent(params: &ModelParams, kappa: &[f64; 2], j: usize, omega: f64) -> C64 {
    C64::new(-kappa[j], omega - params.omega[j])
}

pub fn eval_kernels(params: &ModelParams, t: f64) -> Result<Kernels, PerturbError> {
    let w = params.omega_hat();
    if w == 0.0 {
        return Err(PerturbError::ZeroDetuning);
    }
    let kappa = decay_rates(params)?;
    Ok(kernels_unchecked(params, &kappa, t))
}

fn kernels_unchecked(params: &ModelParams, kappa: &[f64; 2], t: f64) -> Kernels {
    let w = params.omega_hat();
    let eta1 = expm1(I * (w * t)) / w;
    let eta2 = (C64::new(t, 0.0) - I * eta1.conj()) / w;
    let eta = |omega: &[f64; 2]| [0, 1].map(|j| exp_integral(eta_exponent(params, kappa, j, omega[j]), t));
    Kernels {
        eta1,
        eta2,
        eta_s: eta(&params.omega_s),
        eta_c: eta(&params.omega_c),
        ik_coeff: [0, 1].map(|j| C64::new(-kappa[j] * t, -params.omega[j] * t).exp()),
    }
}

/// Solution `i_j(t) = coeff · i_j(0) + ∫ amplitude(q) r_j(q) dq` of the
/// reduced information equation, at fixed `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkSolution {
    pub coeff: C64,
    gamma: f64,
    omega: f64,
    omega_r: f64,
    kappa: f64,
    t: f64,
}

impl IkSolution {
    fn denominator(&self, q: f64) -> C64 {
        C64::new(self.kappa, self.omega - self.omega_r * q)
    }

    /// `ρ_j(q, t)` as printed (grows like `e^{κt}`).
    pub fn rho(&self, q: f64) -> C64 {
        exp_integral(self.denominator(q), self.t)
    }

    /// Coefficient `−iγ_j e^{-(iΩ_j+κ_j)t} ρ_j(q,t)` of `r_j(q)`, evaluated in
    /// the combined form `(e^{-iΩ^r q t} − e^{-(iΩ+κ)t}) / (i(Ω − Ω^r q) + κ)`.
    pub fn reservoir_amplitude(&self, q: f64) -> C64 {
        if self.gamma == 0.0 {
            return ZERO;
        }
        let z = self.denominator(q);
        let combined = if z == ZERO {
            C64::new(self.t, 0.0) * self.coeff
        } else {
            let a = C64::new(0.0, -self.omega_r * q * self.t).exp();
            (a - self.coeff) / z
        };
        -I * self.gamma * combined
    }

    /// Coefficients of the discrete bath modes `b_i = r(q_i)√w_i`.
    pub fn bath_coefficients(&self, nodes: &[crate::model::QuadratureNode]) -> Vec<C64> {
        nodes.iter().map(|n| self.reservoir_amplitude(n.q) * n.w.sqrt()).collect()
    }
}

pub fn ik_closed_form_full(params: &ModelParams, j: usize, t: f64) -> Result<IkSolution, PerturbError> {
    let kappa = params
        .damping_rate(j)
        .map_err(|_| PerturbError::ZeroDispersion(j as u8 + 1))?;
    Ok(IkSolution {
        coeff: C64::new(-kappa * t, -params.omega[j] * t).exp(),
        gamma: params.gamma[j],
        omega: params.omega[j],
        omega_r: params.omega_r[j],
        kappa,
        t,
    })
}

/// Integer brackets multiplying `(2λ²/ω̂²)(1 − cos ω̂t)` in
/// `n1, n2, k1, k2`, in that order.
pub fn hint_brackets(n1: i64, n2: i64, k1: i64, k2: i64) -> [i64; 4] {
    [
        n1 * (k1 * n2 - k1 * k2 - n2 * k2 - k2) + n2 * k1 * (1 + k2),
        n2 * (n1 * k2 - k1 * k2 - k1 * n1 - k1) + n1 * k2 * (1 + k1),
        k1 * (n1 * k2 - n1 * n2 - n2 * k2 - n2) + n1 * k2 * (1 + n2),
        k2 * (k1 * n2 - n1 * n2 - n1 * k1 - n1) + k1 * n2 * (1 + n1),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanOccupations {
    pub shares: [f64; 2],
    pub cash: [f64; 2],
}

/// `λ²` coefficients of `n_j(t) − n_j` and `k_j(t) − k_j`.
pub fn second_order_coefficients(inputs: &PerturbInputs, t: f64) -> MeanOccupations {
    let p = &inputs.params;
    let init = &inputs.init;
    let kern = kernels_unchecked(p, &inputs.decay_rates(), t);
    let w = p.omega_hat();
    let osc = 2.0 / (w * w) * (1.0 - (w * t).cos());
    let b = hint_brackets(init.n[0] as i64, init.n[1] as i64, init.k[0] as i64, init.k[1] as i64);
    let info = [init.i[0] as f64, init.i[1] as f64];
    MeanOccupations {
        shares: [
            osc * b[0] as f64 + info[0] * kern.eta_s[0].norm_sqr(),
            osc * b[1] as f64 + info[1] * kern.eta_s[1].norm_sqr(),
        ],
        cash: [
            osc * b[2] as f64 + info[0] * kern.eta_c[0].norm_sqr(),
            osc * b[3] as f64 + info[1] * kern.eta_c[1].norm_sqr(),
        ],
    }
}

/// Second-order `n_j(t)`, `k_j(t)`.
pub fn mean_occupations(inputs: &PerturbInputs, t: f64) -> MeanOccupations {
    let l2 = inputs.params.lambda * inputs.params.lambda;
    let c = second_order_coefficients(inputs, t);
    let init = &inputs.init;
    MeanOccupations {
        shares: [0, 1].map(|j| init.n[j] as f64 + l2 * c.shares[j]),
        cash: [0, 1].map(|j| init.k[j] as f64 + l2 * c.cash[j]),
    }
}

/// `δΠ_j(t) = λ² I_j (|η^s|² + |η^c|²)`.
pub fn delta_pi(inputs: &PerturbInputs, t: f64) -> [f64; 2] {
    let p = &inputs.params;
    let kern = kernels_unchecked(p, &inputs.decay_rates(), t);
    [0, 1].map(|j| {
        p.lambda * p.lambda * inputs.init.i[j] as f64 * (kern.eta_s[j].norm_sqr() + kern.eta_c[j].norm_sqr())
    })
}

/// `δΠ_j(∞)`: a sum of two Lorentzians in the detunings `ω_j^{s,c} − Ω_j`.
pub fn delta_pi_infinity(inputs: &PerturbInputs) -> Result<[f64; 2], PerturbError> {
    asymptotic_portfolio_change(&inputs.params, inputs.init.i)
}

/// `δΠ_j(∞)` straight from the parameters. The `H_I` contribution to the
/// portfolios cancels for any `ω̂`, so neither `ω̂ ≠ 0` nor `λ = λ_inf` is
/// needed here; the information coupling `λ_inf` sets the scale.
pub fn asymptotic_portfolio_change(params: &ModelParams, info: [u32; 2]) -> Result<[f64; 2], PerturbError> {
    let p = params;
    let kappa = decay_rates(p)?;
    let mut out = [0.0; 2];
    for j in 0..2 {
        if !(kappa[j] > 0.0) {
            return Err(PerturbError::NoDecay(j as u8 + 1));
        }
        let lorentz = |omega: f64| 1.0 / ((omega - p.omega[j]).powi(2) + kappa[j] * kappa[j]);
        out[j] = p.lambda_inf * p.lambda_inf * info[j] as f64 * (lorentz(p.omega_s[j]) + lorentz(p.omega_c[j]));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Share,
    Cash,
}

/// `|η^{s,c}(t)|²` from the explicit modulus formula
/// `(e^{-2κt} − 2e^{-κt} cos(Δt) + 1) / (Δ² + κ²)`.
pub fn eta_modulus_sq_explicit(params: &ModelParams, j: usize, channel: Channel, t: f64) -> Result<f64, PerturbError> {
    let kappa = decay_rates(params)?[j];
    let omega = match channel {
        Channel::Share => params.omega_s[j],
        Channel::Cash => params.omega_c[j],
    };
    let d = omega - params.omega[j];
    Ok(((-2.0 * kappa * t).exp() - 2.0 * (-kappa * t).exp() * (d * t).cos() + 1.0) / (d * d + kappa * kappa))
}

/// Perturbative time series: `n_j`, `k_j` from the second-order formulas,
/// `⟨I_j⟩ = I_j e^{-2κ_j t}` from the reduced information dynamics.
pub fn perturbative_series(inputs: &PerturbInputs, times: &[f64]) -> Result<TimeSeries, PerturbError> {
    check_time_grid(times)?;
    let kappa = inputs.decay_rates();
    let records = times
        .iter()
        .map(|&t| {
            let m = mean_occupations(inputs, t);
            Record {
                shares: m.shares,
                cash: m.cash,
                info: [0, 1].map(|j| inputs.init.i[j] as f64 * (-2.0 * kappa[j] * t).exp()),
                portfolio: [m.shares[0] + m.cash[0], m.shares[1] + m.cash[1]],
                conserved: None,
                leakage: None,
            }
        })
        .collect();
    Ok(TimeSeries {
        engine: Engine::Perturbative,
        times: times.to_vec(),
        records,
    })
}

// Gauss–Kronrod 7/15 abscissae and weights on [-1, 1].
const GK_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_W: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const G_W: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> C64>(f: &F, a: f64, b: f64) -> (C64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * GK_W[7];
    let mut gauss = fc * G_W[3];
    for k in 0..7 {
        let dx = h * GK_X[k];
        let pair = f(c - dx) + f(c + dx);
        kronrod += pair * GK_W[k];
        if k % 2 == 1 {
            gauss += pair * G_W[k / 2];
        }
    }
    ((kronrod * h), ((kronrod - gauss) * h).norm())
}

/// Globally adaptive Gauss–Kronrod quadrature of a complex integrand;
/// stops once the summed error estimate is below `tol·max(1, |result|)`.
pub fn integrate_adaptive<F: Fn(f64) -> C64>(f: F, a: f64, b: f64, tol: f64) -> Result<C64, PerturbError> {
    if a == b {
        return Ok(ZERO);
    }
    let (v, e) = gk15(&f, a, b);
    let mut parts = vec![(a, b, v, e)];
    for _ in 0..2000 {
        let total: C64 = parts.iter().map(|p| p.2).sum();
        let err: f64 = parts.iter().map(|p| p.3).sum();
        if err <= tol * total.norm().max(1.0) {
            return Ok(total);
        }
        let (worst, _) = parts
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, p)| if p.3 > acc.1 { (i, p.3) } else { acc });
        let (lo, hi, _, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        parts.push((lo, mid, v1, e1));
        parts.push((mid, hi, v2, e2));
        // Keep summation order independent of the refinement history.
        parts.sort_by(|x, y| x.0.total_cmp(&y.0));
    }
    let err: f64 = parts.iter().map(|p| p.3).sum();
    Err(PerturbError::Quadrature { a, b, tol, error: err })
}

/// `σ1, σ2, θ1, θ2` to second order, stored as the operator coefficients of
/// `λ⁰`, `λ¹`, `λ²` (`λ` factored out).
#[derive(Clone, Debug)]
pub struct PerturbativeBundle {
    pub t: f64,
    /// Order: `σ1, σ2, θ1, θ2`.
    pub orders: [[OperatorSum; 3]; 4],
}

pub const SIGMA1: usize = 0;
pub const SIGMA2: usize = 1;
pub const THETA1: usize = 2;
pub const THETA2: usize = 3;

impl PerturbativeBundle {
    pub fn materialize(&self, basis: &Basis) -> [[SparseOperator; 3]; 4] {
        self.orders.clone().map(|o| o.map(|sum| basis.materialize(&sum)))
    }

    /// Coefficients of `λ⁰ … λ⁴` in `⟨φ| A_truncated† A_truncated |φ⟩` for
    /// each of the four operators, where `A` is truncated at `max_order`
    /// (1 or 2). `phi` is given as occupations over `layout`.
    pub fn expectation_coefficients(
        &self,
        layout: &ModeLayout,
        phi: &[u32],
        max_order: usize,
    ) -> Result<[[f64; 5]; 4], PerturbError> {
        let mut out = [[0.0; 5]; 4];
        for (op, coeffs) in self.orders.iter().zip(out.iter_mut()) {
            let images: Vec<Vec<(u128, C64)>> = op[..=max_order]
                .iter()
                .map(|sum| apply_to_number_state(layout, sum, phi))
                .collect::<Result<_, _>>()?;
            for (a, va) in images.iter().enumerate() {
                for (b, vb) in images.iter().enumerate() {
                    coeffs[a + b] += sparse_inner(va, vb).re;
                }
            }
        }
        Ok(out)
    }
}

/// `sum |φ⟩` as a sorted sparse vector; fails if any monomial reaches past
/// a cutoff.
fn apply_to_number_state(layout: &ModeLayout, sum: &OperatorSum, phi: &[u32]) -> Result<Vec<(u128, C64)>, PerturbError> {
    let mut out: Vec<(u128, C64)> = Vec::new();
    for (c, mono) in &sum.terms {
        match mono.apply(phi, layout.cutoffs()) {
            Action::Zero => {}
            Action::Clipped => {
                let mode = mono
                    .0
                    .iter()
                    .map(|l| match l {
                        Ladder::Lower(m) | Ladder::Raise(m) => layout.modes()[*m].to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join("");
                return Err(PerturbError::CutoffTooSmall { mode });
            }
            Action::Hit(occ, amp) => out.push((layout.flat_index(&occ), c * amp)),
        }
    }
    out.sort_by_key(|e| e.0);
    let mut merged: Vec<(u128, C64)> = Vec::with_capacity(out.len());
    for (k, v) in out {
        match merged.last_mut() {
            Some(last) if last.0 == k => last.1 += v,
            _ => merged.push((k, v)),
        }
    }
    Ok(merged)
}

fn sparse_inner(a: &[(u128, C64)], b: &[(u128, C64)]) -> C64 {
    let (mut i, mut j, mut acc) = (0, 0, ZERO);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1.conj() * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

const QUAD_TOL: f64 = 1e-12;

/// Builds the first- and second-order operator solutions at time `t`.
/// Operator products are kept in the printed order.
pub fn build_perturbative_operators(layout: &ModeLayout, inputs: &PerturbInputs, t: f64) -> Result<PerturbativeBundle, PerturbError> {
    let idx = TraderIndices::of(layout)?;
    let p = &inputs.params;
    let kappa = inputs.decay_rates();
    let kern = kernels_unchecked(p, &kappa, t);
    let w = p.omega_hat();

    let lo = |m: usize| Ladder::Lower(m);
    let hi = |m: usize| Ladder::Raise(m);
    let (s1, s2, c1, c2, i1, i2) = (idx.s[0], idx.s[1], idx.c[0], idx.c[1], idx.i[0], idx.i[1]);
    let mono = |ls: &[Ladder]| Monomial(ls.to_vec());
    let single = |m: Monomial| {
        let mut s = OperatorSum::new();
        s.push(ONE, m);
        s
    };

    let x = [
        mono(&[lo(s2), lo(c1), hi(c2)]),
        mono(&[lo(s1), hi(c1), lo(c2)]),
        mono(&[lo(s1), hi(s2), lo(c2)]),
        mono(&[hi(s1), lo(s2), lo(c1)]),
    ];
    let prefixed = |head: Ladder, terms: &[(f64, Vec<Ladder>)]| {
        let mut s = OperatorSum::new();
        for (c, ls) in terms {
            let mut v = vec![head];
            v.extend_from_slice(ls);
            s.push(C64::new(*c, 0.0), Monomial(v));
        }
        s
    };
    let y = [
        prefixed(
            lo(s1),
            &[
                (1.0, vec![hi(c1), lo(c1), lo(c2), hi(c2)]),
                (1.0, vec![lo(s2), hi(s2), lo(c2), hi(c2)]),
                (-1.0, vec![lo(c1), hi(c1), lo(s2), hi(s2)]),
            ],
        ),
        prefixed(
            lo(s2),
            &[
                (-1.0, vec![lo(s1), hi(s1), hi(c1), lo(c1)]),
                (1.0, vec![lo(s1), hi(s1), hi(c2), lo(c2)]),
                (-1.0, vec![lo(c1), hi(c1), hi(c2), lo(c2)]),
            ],
        ),
        prefixed(
            lo(c1),
            &[
                (1.0, vec![lo(s1), hi(s1), hi(c2), lo(c2)]),
                (-1.0, vec![lo(s2), hi(s2), hi(c2), lo(c2)]),
                (-1.0, vec![lo(s1), hi(s1), hi(s2), lo(s2)]),
            ],
        ),
        prefixed(
            lo(c2),
            &[
                (1.0, vec![hi(s1), lo(s1), lo(s2), hi(s2)]),
                (1.0, vec![hi(s1), lo(s1), hi(c1), lo(c1)]),
                (-1.0, vec![hi(s2), lo(s2), hi(c1), lo(c1)]),
            ],
        ),
    ];

    // Scalar profiles of I_j^{s,c}(t1) (and their adjoints) entering G_j.
    #[derive(Clone, Copy)]
    enum Profile {
        S(usize),
        C(usize),
    }
    let profile = |pr: Profile, t1: f64, adjoint: bool| -> C64 {
        let (j, omega) = match pr {
            Profile::S(j) => (j, p.omega_s[j]),
            Profile::C(j) => (j, p.omega_c[j]),
        };
        let v = exp_integral(eta_exponent(p, &kappa, j, omega), t1);
        if adjoint {
            v.conj()
        } else {
            v
        }
    };
    // Each G_j term: (sign, trader-mode ladders, info profile, adjoint?).
    type GTerm = (f64, Vec<Ladder>, Profile, bool);
    let g: [Vec<GTerm>; 4] = [
        vec![
            (-1.0, vec![lo(s2), lo(c1), hi(i2)], Profile::C(1), true),
            (1.0, vec![lo(s2), hi(c2), lo(i1)], Profile::C(0), false),
            (1.0, vec![lo(c1), hi(c2), lo(i2)], Profile::S(1), false),
        ],
        vec![
            (1.0, vec![lo(s1), hi(c1), lo(i2)], Profile::C(1), false),
            (-1.0, vec![lo(s1), lo(c2), hi(i1)], Profile::C(0), true),
            (1.0, vec![hi(c1), lo(c2), lo(i1)], Profile::S(0), false),
        ],
        vec![
            (1.0, vec![lo(s1), hi(s2), lo(i2)], Profile::C(1), false),
            (1.0, vec![hi(s2), lo(c2), lo(i1)], Profile::S(0), false),
            (-1.0, vec![lo(s1), lo(c2), hi(i2)], Profile::S(1), true),
        ],
        vec![
            (1.0, vec![hi(s1), lo(s2), lo(i1)], Profile::C(0), false),
            (1.0, vec![hi(s1), lo(c1), lo(i2)], Profile::S(1), false),
            (-1.0, vec![lo(s2), lo(c1), hi(i1)], Profile::S(0), true),
        ],
    ];
    // Q_1, Q_4 carry e^{+iω̂t1}; Q_2, Q_3 carry e^{-iω̂t1}.
    let q_sign = [1.0, -1.0, -1.0, 1.0];
    let mut q = Vec::with_capacity(4);
    for (terms, sign) in g.iter().zip(q_sign) {
        let mut sum = OperatorSum::new();
        for (c, ladders, pr, adj) in terms {
            let integral = integrate_adaptive(
                |t1| profile(*pr, t1, *adj) * C64::from_polar(1.0, sign * w * t1),
                0.0,
                t,
                QUAD_TOL,
            )?;
            sum.push(-I * *c * integral, Monomial(ladders.clone()));
        }
        q.push(sum);
    }

    let base = [lo(s1), lo(s2), lo(c1), lo(c2)];
    let info_mode = [i1, i2, i1, i2];
    let info_eta = [kern.eta_s[0], kern.eta_s[1], kern.eta_c[0], kern.eta_c[1]];
    // Coefficient of X_j inside the first-order bracket, and of Y_j in the second.
    let x_coeff = [-I * kern.eta1, I * kern.eta1.conj(), I * kern.eta1.conj(), -I * kern.eta1];
    let y_coeff = [kern.eta2.conj(), kern.eta2, kern.eta2, kern.eta2.conj()];

    let mut orders: Vec<[OperatorSum; 3]> = Vec::with_capacity(4);
    for j in 0..4 {
        let zeroth = single(Monomial(vec![base[j]]));
        let mut first = OperatorSum::new();
        first.push(-I * x_coeff[j], x[j].clone());
        first.push(-I * info_eta[j], Monomial::lower(info_mode[j]));
        let mut second = OperatorSum::new();
        for (c, m) in &q[j].terms {
            second.push(-I * c, m.clone());
        }
        for (c, m) in &y[j].terms {
            second.push(-I * y_coeff[j] * c, m.clone());
        }
        orders.push([zeroth, first, second]);
    }
    let orders: [[OperatorSum; 3]; 4] = orders.try_into().expect("four operators");
    Ok(PerturbativeBundle { t, orders })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::build_layout;
    use crate::model::ReservoirGrid;
    use std::f64::consts::PI;

    fn params(lambda: f64) -> ModelParams {
        ModelParams {
            omega_s: [0.9, 0.4],
            omega_c: [0.3, 0.7],
            omega: [0.5, 0.6],
            lambda_inf: lambda,
            lambda,
            gamma: [0.2, 0.15],
            omega_r: [1.0, 1.3],
            reservoir_grid: ReservoirGrid::default(),
        }
    }

    fn init() -> InitialOccupations {
        InitialOccupations {
            n: [1, 0],
            k: [1, 1],
            i: [1, 1],
        }
    }

    #[test]
    fn input_preconditions() {
        let mut p = params(0.1);
        p.omega_c[1] = p.omega_s[1] - p.omega_s[0] + p.omega_c[0];
        assert_eq!(PerturbInputs::new(p, init()), Err(PerturbError::ZeroDetuning));
        let p = params(0.1).with_couplings(0.1, 0.2);
        assert!(matches!(PerturbInputs::new(p, init()), Err(PerturbError::CouplingMismatch { .. })));
        let mut p = params(0.1);
        p.omega_r[1] = 0.0;
        assert_eq!(PerturbInputs::new(p, init()), Err(PerturbError::ZeroDispersion(2)));
    }

    #[test]
    fn kernels_at_origin_and_full_period() {
        let k = eval_kernels(&params(0.1), 0.0).unwrap();
        assert_eq!(k.eta1, ZERO);
        assert_eq!(k.eta2, ZERO);
        assert_eq!(k.eta_s, [ZERO; 2]);
        assert_eq!(k.eta_c, [ZERO; 2]);
        assert_eq!(k.ik_coeff, [ONE; 2]);

        let mut p = params(0.1);
        // ω̂ = 2π.
        p.omega_s[0] = 2.0 * PI + p.omega_s[1] + p.omega_c[0] - p.omega_c[1];
        let k = eval_kernels(&p, 1.0).unwrap();
        assert!(k.eta1.norm() < 1e-15);
    }

    #[test]
    fn zero_exponent_kernel_is_linear() {
        let mut p = params(0.1);
        p.gamma = [0.0; 2];
        p.omega_s[0] = p.omega[0];
        let k = eval_kernels(&p, 3.0).unwrap();
        assert_eq!(k.eta_s[0], C64::new(3.0, 0.0));
    }

    #[test]
    fn gauss_kronrod_known_integrals() {
        let v = integrate_adaptive(|x| C64::new(x.cos(), x.sin()), 0.0, 20.0, 1e-13).unwrap();
        let exact = (C64::new(0.0, 20.0).exp() - ONE) / I;
        assert!((v - exact).norm() < 1e-12);
        let v = integrate_adaptive(|x| C64::new((-x * x).exp(), 0.0), -8.0, 8.0, 1e-13).unwrap();
        assert!((v.re - PI.sqrt()).abs() < 1e-12);
        assert_eq!(integrate_adaptive(|_| ONE, 1.0, 1.0, 1e-12).unwrap(), ZERO);
    }

    #[test]
    fn ik_solution_limits() {
        let p = params(0.1);
        let s = ik_closed_form_full(&p, 0, 0.0).unwrap();
        assert_eq!(s.coeff, ONE);
        assert_eq!(s.rho(0.3), ZERO);
        assert_eq!(s.reservoir_amplitude(0.3), ZERO);

        let mut q = p.clone();
        q.gamma = [0.0, 0.0];
        let s = ik_closed_form_full(&q, 0, 2.0).unwrap();
        assert!((s.coeff - C64::from_polar(1.0, -q.omega[0] * 2.0)).norm() < 1e-15);
        assert_eq!(s.reservoir_amplitude(1.7), ZERO);

        let kappa = p.damping_rate(0).unwrap();
        let mut last = 1.0;
        for k in 1..50 {
            let t = 0.5 * k as f64;
            let m = ik_closed_form_full(&p, 0, t).unwrap().coeff.norm();
            assert!((m - (-kappa * t).exp()).abs() < 1e-14);
            assert!(m < last);
            last = m;
        }
    }

    #[test]
    fn ik_combined_form_matches_printed_product() {
        let p = params(0.1);
        let s = ik_closed_form_full(&p, 1, 3.0).unwrap();
        for q in [-2.0, -0.1, 0.46, 1.5] {
            let printed = -I * p.gamma[1] * s.coeff * s.rho(q);
            assert!((printed - s.reservoir_amplitude(q)).norm() < 1e-13);
        }
    }

    #[test]
    fn ik_solution_nearly_unitary_for_weak_coupling() {
        // |coeff|² + ∫|amplitude|² dq ≈ 1 for a dense fine bath.
        let mut p = params(0.1);
        p.gamma = [0.05, 0.05];
        let s = ik_closed_form_full(&p, 0, 20.0).unwrap();
        let nodes = crate::model::midpoint_nodes(40.0, 8000);
        let bath: f64 = s.bath_coefficients(&nodes).iter().map(|c| c.norm_sqr()).sum();
        assert!((s.coeff.norm_sqr() + bath - 1.0).abs() < 1e-2);
    }

    #[test]
    fn delta_pi_is_sum_of_occupation_changes() {
        let inputs = PerturbInputs::new(params(0.07), InitialOccupations { n: [2, 1], k: [0, 3], i: [2, 1] }).unwrap();
        for k in 0..40 {
            let t = 0.37 * k as f64;
            let m = mean_occupations(&inputs, t);
            let d = delta_pi(&inputs, t);
            let init = inputs.init();
            for j in 0..2 {
                let direct = m.shares[j] + m.cash[j] - (init.n[j] + init.k[j]) as f64;
                assert!((direct - d[j]).abs() < 1e-13, "{direct} vs {}", d[j]);
            }
        }
    }

    #[test]
    fn zero_coupling_and_origin() {
        let inputs = PerturbInputs::new(params(0.0), init()).unwrap();
        for t in [0.0, 1.0, 7.5] {
            let m = mean_occupations(&inputs, t);
            assert_eq!(m.shares, [1.0, 0.0]);
            assert_eq!(m.cash, [1.0, 1.0]);
            assert_eq!(delta_pi(&inputs, t), [0.0, 0.0]);
        }
        let inputs = PerturbInputs::new(params(0.3), init()).unwrap();
        let m = mean_occupations(&inputs, 0.0);
        assert_eq!(m.shares, [1.0, 0.0]);
        assert_eq!(m.cash, [1.0, 1.0]);
    }

    #[test]
    fn modulus_formula_agrees() {
        let p = params(0.1);
        for k in 0..60 {
            let t = 0.33 * k as f64;
            let kern = eval_kernels(&p, t).unwrap();
            for j in 0..2 {
                let s = eta_modulus_sq_explicit(&p, j, Channel::Share, t).unwrap();
                let c = eta_modulus_sq_explicit(&p, j, Channel::Cash, t).unwrap();
                assert!((s - kern.eta_s[j].norm_sqr()).abs() < 1e-12);
                assert!((c - kern.eta_c[j].norm_sqr()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn asymptote_requires_decay() {
        let mut p = params(0.1);
        p.gamma[1] = 0.0;
        let inputs = PerturbInputs::new(p, init()).unwrap();
        assert_eq!(delta_pi_infinity(&inputs), Err(PerturbError::NoDecay(2)));
    }

    #[test]
    fn bundle_at_origin_is_bare_operators() {
        let l = build_layout([3; 6], 0, 1).unwrap();
        let inputs = PerturbInputs::new(params(0.1), init()).unwrap();
        let b = build_perturbative_operators(&l, &inputs, 0.0).unwrap();
        let basis = Basis::full(&l).unwrap();
        let ops = b.materialize(&basis);
        let idx = TraderIndices::of(&l).unwrap();
        let bare = [idx.s[0], idx.s[1], idx.c[0], idx.c[1]];
        for j in 0..4 {
            let a = basis.materialize(&{
                let mut s = OperatorSum::new();
                s.push(ONE, Monomial::lower(bare[j]));
                s
            });
            assert_eq!(ops[j][0].max_abs_diff(&a).unwrap(), 0.0);
            assert!(ops[j][1].is_zero());
            assert!(ops[j][2].is_zero());
        }
    }

    #[test]
    fn bundle_rejects_small_cutoffs() {
        let l = build_layout([1; 6], 0, 1).unwrap();
        let inputs = PerturbInputs::new(params(0.1), init()).unwrap();
        let b = build_perturbative_operators(&l, &inputs, 1.0).unwrap();
        let phi = l.occupation_vector(&init().mode_list()).unwrap();
        assert!(matches!(
            b.expectation_coefficients(&l, &phi, 2),
            Err(PerturbError::CutoffTooSmall { .. })
        ));
    }
}
