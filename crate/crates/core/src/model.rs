//! Hamiltonians and conserved observables of the two-trader market.
//!
//! Free part `H0 = Σ_j ω_j^s S_j + ω_j^c K_j + Ω_j I_j + Σ_i Ω_j^(r) q_i B_ji`,
//! information part `Hinf = Σ_j λ_inf (i_j(s_j† + c_j†) + h.c.) + Σ_i γ_j √w_i (i_j† b_ji + h.c.)`
//! and trading part `Hint = λ (s1 c1† s2† c2 + h.c.)`.
//!
//! The reservoir continuum `r_j(q)` is replaced by quadrature modes
//! `b_ji ≈ r_j(q_i) √w_i` with unit commutators: couplings pick up `√w_i`,
//! energies are `Ω_j^(r) q_i`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::fock::{
    Basis, FockError, Ladder, ModeId, ModeLayout, Monomial, OperatorSum, SparseOperator, C64,
    TRADER_MODES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error("layout is missing trader mode {0}")]
    MissingMode(ModeId),
    #[error("reservoir grid of trader {trader}: {reason}")]
    BadGrid { trader: u8, reason: String },
    #[error("layout has {layout} reservoir modes for trader {trader} but the grid has {grid} nodes")]
    GridLayoutMismatch {
        trader: u8,
        layout: usize,
        grid: usize,
    },
    #[error("reservoir dispersion slope omega_r[{0}] is zero")]
    ZeroDispersion(u8),
    #[error("parameter {name} = {value} is not finite")]
    NotFinite { name: String, value: f64 },
}

/// One quadrature node of the reservoir momentum grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureNode {
    pub q: f64,
    pub w: f64,
}

/// Reservoir momentum grids, one per trader.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirGrid {
    pub trader1: Vec<QuadratureNode>,
    pub trader2: Vec<QuadratureNode>,
}

impl ReservoirGrid {
    /// Uniform midpoint rule on `[-window, window]` with `nodes` points, same
    /// grid for both traders.
    pub fn midpoint(window: f64, nodes: usize) -> Self {
        let grid = midpoint_nodes(window, nodes);
        Self {
            trader1: grid.clone(),
            trader2: grid,
        }
    }

    pub fn nodes(&self, trader: u8) -> &[QuadratureNode] {
        match trader {
            1 => &self.trader1,
            _ => &self.trader2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.trader1.is_empty() && self.trader2.is_empty()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for trader in 1..=2u8 {
            let nodes = self.nodes(trader);
            for (i, n) in nodes.iter().enumerate() {
                if !(n.w > 0.0) || !n.w.is_finite() {
                    return Err(ModelError::BadGrid {
                        trader,
                        reason: format!("weight {} at node {i} is not positive", n.w),
                    });
                }
                if !n.q.is_finite() {
                    return Err(ModelError::BadGrid {
                        trader,
                        reason: format!("node {i} is not finite"),
                    });
                }
                if i > 0 && !(n.q > nodes[i - 1].q) {
                    return Err(ModelError::BadGrid {
                        trader,
                        reason: format!("nodes not strictly increasing at index {i}"),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn midpoint_nodes(window: f64, nodes: usize) -> Vec<QuadratureNode> {
    let h = 2.0 * window / nodes as f64;
    (0..nodes)
        .map(|i| QuadratureNode {
            q: -window + h * (i as f64 + 0.5),
            w: h,
        })
        .collect()
}

/// Real constants of the model. Index 0 is trader 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub omega_s: [f64; 2],
    pub omega_c: [f64; 2],
    /// Information-mode frequencies `Ω_j`.
    pub omega: [f64; 2],
    pub lambda_inf: f64,
    pub lambda: f64,
    pub gamma: [f64; 2],
    /// Slopes of the linear reservoir dispersion `Ω_j^(r)(q) = Ω_j^(r) q`.
    pub omega_r: [f64; 2],
    #[serde(default, skip_serializing_if = "ReservoirGrid::is_empty")]
    pub reservoir_grid: ReservoirGrid,
}

impl ModelParams {
    /// Interaction detuning `ω1^s − ω2^s − ω1^c + ω2^c`.
    pub fn omega_hat(&self) -> f64 {
        self.omega_s[0] - self.omega_s[1] - self.omega_c[0] + self.omega_c[1]
    }

    /// Amplitude damping rate `π γ_j² / Ω_j^(r)` of `i_j(t)`; `j` is 0-based.
    pub fn damping_rate(&self, j: usize) -> Result<f64, ModelError> {
        if self.omega_r[j] == 0.0 {
            return Err(ModelError::ZeroDispersion(j as u8 + 1));
        }
        Ok(PI * self.gamma[j] * self.gamma[j] / self.omega_r[j])
    }

    pub fn with_couplings(&self, lambda: f64, lambda_inf: f64) -> Self {
        Self {
            lambda,
            lambda_inf,
            ..self.clone()
        }
    }

    /// Copy with `λ_inf = γ = 0` (information switched off).
    pub fn without_information(&self) -> Self {
        Self {
            lambda_inf: 0.0,
            gamma: [0.0; 2],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let named = [
            ("omega_s[0]", self.omega_s[0]),
            ("omega_s[1]", self.omega_s[1]),
            ("omega_c[0]", self.omega_c[0]),
            ("omega_c[1]", self.omega_c[1]),
            ("omega[0]", self.omega[0]),
            ("omega[1]", self.omega[1]),
            ("lambda_inf", self.lambda_inf),
            ("lambda", self.lambda),
            ("gamma[0]", self.gamma[0]),
            ("gamma[1]", self.gamma[1]),
            ("omega_r[0]", self.omega_r[0]),
            ("omega_r[1]", self.omega_r[1]),
        ];
        for (name, value) in named {
            if !value.is_finite() {
                return Err(ModelError::NotFinite {
                    name: name.to_string(),
                    value,
                });
            }
        }
        self.reservoir_grid.validate()
    }
}

/// Occupations `(n_j, k_j, I_j)` of the initial number state; index 0 is
/// trader 1. The reservoir starts empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialOccupations {
    /// Shares `n_j`.
    pub n: [u32; 2],
    /// Cash `k_j`.
    pub k: [u32; 2],
    /// Lack of information `I_j`.
    pub i: [u32; 2],
}

impl InitialOccupations {
    pub fn mode_list(&self) -> Vec<(ModeId, u32)> {
        vec![
            (ModeId::share(1), self.n[0]),
            (ModeId::share(2), self.n[1]),
            (ModeId::cash(1), self.k[0]),
            (ModeId::cash(2), self.k[1]),
            (ModeId::info(1), self.i[0]),
            (ModeId::info(2), self.i[1]),
        ]
    }

    /// Eigenvalues `m_j = n_j + k_j + I_j` of the conserved `M_j`.
    pub fn conserved(&self) -> [u32; 2] {
        [
            self.n[0] + self.k[0] + self.i[0],
            self.n[1] + self.k[1] + self.i[1],
        ]
    }

    pub fn portfolio(&self) -> [u32; 2] {
        [self.n[0] + self.k[0], self.n[1] + self.k[1]]
    }
}

/// Mode indices of the six trader modes in a layout.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TraderIndices {
    pub s: [usize; 2],
    pub c: [usize; 2],
    pub i: [usize; 2],
}

impl TraderIndices {
    pub fn of(layout: &ModeLayout) -> Result<Self, ModelError> {
        let idx = |m: ModeId| layout.index_of(m).map_err(|_| ModelError::MissingMode(m));
        Ok(Self {
            s: [idx(ModeId::share(1))?, idx(ModeId::share(2))?],
            c: [idx(ModeId::cash(1))?, idx(ModeId::cash(2))?],
            i: [idx(ModeId::info(1))?, idx(ModeId::info(2))?],
        })
    }
}

fn check_trader_modes(layout: &ModeLayout) -> Result<(), ModelError> {
    for m in TRADER_MODES {
        if !layout.contains(m) {
            return Err(ModelError::MissingMode(m));
        }
    }
    Ok(())
}

fn check_grid(layout: &ModeLayout, params: &ModelParams) -> Result<(), ModelError> {
    params.reservoir_grid.validate()?;
    for trader in 1..=2u8 {
        let in_layout = layout.reservoir_modes(trader).len();
        let in_grid = params.reservoir_grid.nodes(trader).len();
        if in_layout != in_grid {
            return Err(ModelError::GridLayoutMismatch {
                trader,
                layout: in_layout,
                grid: in_grid,
            });
        }
    }
    Ok(())
}

fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// The three Hamiltonian pieces as normal-form operator polynomials, usable
/// on any basis of the layout.
#[derive(Clone, Debug)]
pub struct HamiltonianTerms {
    pub h0: OperatorSum,
    pub hinf: OperatorSum,
    pub hint: OperatorSum,
}

impl HamiltonianTerms {
    pub fn new(layout: &ModeLayout, params: &ModelParams) -> Result<Self, ModelError> {
        check_trader_modes(layout)?;
        check_grid(layout, params)?;
        let t = TraderIndices::of(layout)?;

        let mut h0 = OperatorSum::new();
        let mut hinf = OperatorSum::new();
        for j in 0..2 {
            let trader = j as u8 + 1;
            h0.push(re(params.omega_s[j]), Monomial::number(t.s[j]));
            h0.push(re(params.omega_c[j]), Monomial::number(t.c[j]));
            h0.push(re(params.omega[j]), Monomial::number(t.i[j]));

            // λ_inf (i_j s_j† + i_j c_j†) + h.c.
            let mut info = OperatorSum::new();
            info.push(re(params.lambda_inf), Monomial(vec![Ladder::Lower(t.i[j]), Ladder::Raise(t.s[j])]));
            info.push(re(params.lambda_inf), Monomial(vec![Ladder::Lower(t.i[j]), Ladder::Raise(t.c[j])]));

            let modes = layout.reservoir_modes(trader);
            for (node, &b) in params.reservoir_grid.nodes(trader).iter().zip(&modes) {
                h0.push(re(params.omega_r[j] * node.q), Monomial::number(b));
                // γ_j √w (i_j† b) + h.c.
                info.push(
                    re(params.gamma[j] * node.w.sqrt()),
                    Monomial(vec![Ladder::Raise(t.i[j]), Ladder::Lower(b)]),
                );
            }
            hinf.extend(&info).extend(&info.adjoint());
        }

        let mut sell = OperatorSum::new();
        sell.push(
            re(params.lambda),
            Monomial(vec![
                Ladder::Lower(t.s[0]),
                Ladder::Raise(t.c[0]),
                Ladder::Raise(t.s[1]),
                Ladder::Lower(t.c[1]),
            ]),
        );
        let mut hint = sell.clone();
        hint.extend(&sell.adjoint());

        Ok(Self { h0, hinf, hint })
    }

    pub fn total(&self) -> OperatorSum {
        let mut h = self.h0.clone();
        h.extend(&self.hinf).extend(&self.hint);
        h
    }
}

/// `H0` on the full space of `layout`.
pub fn build_h0(layout: &ModeLayout, params: &ModelParams) -> Result<SparseOperator, ModelError> {
    let terms = HamiltonianTerms::new(layout, params)?;
    Ok(Basis::full(layout)?.materialize(&terms.h0))
}

/// `Hinf` on the full space of `layout`.
pub fn build_hinf(layout: &ModeLayout, params: &ModelParams) -> Result<SparseOperator, ModelError> {
    let terms = HamiltonianTerms::new(layout, params)?;
    Ok(Basis::full(layout)?.materialize(&terms.hinf))
}

/// `Hint` on the full space of `layout`.
pub fn build_hint(layout: &ModeLayout, params: &ModelParams) -> Result<SparseOperator, ModelError> {
    let terms = HamiltonianTerms::new(layout, params)?;
    Ok(Basis::full(layout)?.materialize(&terms.hint))
}

/// Hamiltonians and number-type observables on one basis.
#[derive(Clone, Debug)]
pub struct ModelOperators {
    pub basis: Basis,
    pub h0: SparseOperator,
    pub hinf: SparseOperator,
    pub hint: SparseOperator,
    pub h: SparseOperator,
    /// `M_j = Π_j + I_j + R_j`.
    pub m: [SparseOperator; 2],
    /// Portfolios `Π_j = S_j + K_j`.
    pub pi: [SparseOperator; 2],
    pub s: [SparseOperator; 2],
    pub k: [SparseOperator; 2],
    pub info: [SparseOperator; 2],
    /// Total reservoir occupation `R_j = Σ_i b_ji† b_ji`.
    pub r: [SparseOperator; 2],
    /// Basis states on which truncated `H` deviates from the untruncated one.
    pub boundary: Vec<bool>,
}

/// Full-space operator bundle.
pub fn build_conserved(layout: &ModeLayout, params: &ModelParams) -> Result<ModelOperators, ModelError> {
    ModelOperators::on_basis(&Basis::full(layout)?, params)
}

impl ModelOperators {
    /// Builds every operator directly on `basis` (full space or a subset).
    pub fn on_basis(basis: &Basis, params: &ModelParams) -> Result<Self, ModelError> {
        let layout = basis.layout();
        let terms = HamiltonianTerms::new(layout, params)?;
        let t = TraderIndices::of(layout)?;
        let h0 = basis.materialize(&terms.h0);
        let hinf = basis.materialize(&terms.hinf);
        let hint = basis.materialize(&terms.hint);
        let h = basis.materialize(&terms.total());
        let boundary = basis.truncation_boundary(&terms.total());

        let res: [Vec<usize>; 2] = [layout.reservoir_modes(1), layout.reservoir_modes(2)];
        let s = [0, 1].map(|j| basis.diagonal(|o| o[t.s[j]] as f64));
        let k = [0, 1].map(|j| basis.diagonal(|o| o[t.c[j]] as f64));
        let info = [0, 1].map(|j| basis.diagonal(|o| o[t.i[j]] as f64));
        let r = [0, 1].map(|j| basis.diagonal(|o| res[j].iter().map(|&b| o[b] as f64).sum()));
        let pi = [0, 1].map(|j| basis.diagonal(|o| (o[t.s[j]] + o[t.c[j]]) as f64));
        let m = [0, 1].map(|j| {
            basis.diagonal(|o| {
                (o[t.s[j]] + o[t.c[j]] + o[t.i[j]]) as f64 + res[j].iter().map(|&b| o[b] as f64).sum::<f64>()
            })
        });

        Ok(Self {
            basis: basis.clone(),
            h0,
            hinf,
            hint,
            h,
            m,
            pi,
            s,
            k,
            info,
            r,
            boundary,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Restriction of every operator to `positions` of this bundle's basis,
    /// whose states form `sub`.
    pub fn restrict(&self, sub: &Basis, positions: &[usize]) -> Self {
        let r = |op: &SparseOperator| op.restrict(positions);
        let pair = |ops: &[SparseOperator; 2]| [r(&ops[0]), r(&ops[1])];
        Self {
            basis: sub.clone(),
            h0: r(&self.h0),
            hinf: r(&self.hinf),
            hint: r(&self.hint),
            h: r(&self.h),
            m: pair(&self.m),
            pi: pair(&self.pi),
            s: pair(&self.s),
            k: pair(&self.k),
            info: pair(&self.info),
            r: pair(&self.r),
            boundary: positions.iter().map(|&p| self.boundary[p]).collect(),
        }
    }
}

/// `λ_inf (i_j†(s_j + c_j) − i_j(s_j† + c_j†))`, the commutator `[H, Π_j]`
/// in closed form; `j` is 0-based.
pub fn portfolio_commutator_closed_form(
    basis: &Basis,
    params: &ModelParams,
    j: usize,
) -> Result<SparseOperator, ModelError> {
    let t = TraderIndices::of(basis.layout())?;
    let mut x = OperatorSum::new();
    x.push(re(params.lambda_inf), Monomial(vec![Ladder::Raise(t.i[j]), Ladder::Lower(t.s[j])]));
    x.push(re(params.lambda_inf), Monomial(vec![Ladder::Raise(t.i[j]), Ladder::Lower(t.c[j])]));
    let mut full = x.clone();
    for (c, m) in x.adjoint().terms {
        full.push(-c, m);
    }
    Ok(basis.materialize(&full))
}

/// Modes that some term of `sum` can raise.
pub fn raised_modes(sum: &OperatorSum) -> Vec<usize> {
    let mut out: Vec<usize> = sum
        .terms
        .iter()
        .flat_map(|(_, m)| {
            m.0.iter().filter_map(|l| match *l {
                Ladder::Raise(i) => Some(i),
                Ladder::Lower(_) => None,
            })
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// `P A P` with `P` the projector on states strictly below the cutoff of
/// every mode in `modes`.
pub fn interior_projection(basis: &Basis, op: &SparseOperator, modes: &[usize]) -> SparseOperator {
    let keep = basis.interior(modes);
    let mut mask = vec![false; basis.dim()];
    for &p in &keep {
        mask[p] = true;
    }
    SparseOperator::from_triplets(
        op.dim(),
        op.entries().filter(|&(r, c, _)| mask[r] && mask[c]).collect(),
    )
}
