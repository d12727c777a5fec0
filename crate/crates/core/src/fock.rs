//! Truncated multi-mode bosonic Fock space.
//!
//! Every mode `m` carries an occupation cutoff `N_m`; the space is spanned by
//! occupation vectors with `0 <= n_m <= N_m`. Basis states are addressed by a
//! mixed-radix flat index in the layout's mode order (first mode most
//! significant), which makes single-mode ladder operators Kronecker products
//! `1 ⊗ … ⊗ a ⊗ … ⊗ 1`.
//!
//! Operators are stored as [`SparseOperator`] (row-major compressed rows,
//! sorted columns, no duplicates). Products of truncated ladder matrices are
//! reproduced exactly by [`Monomial`] application, which is how model
//! Hamiltonians are assembled on either the full space or a subset basis.

use std::collections::HashMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Default ceiling on the full Hilbert-space dimension, `2^24`.
pub const DEFAULT_MAX_DIMENSION: u128 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FockError {
    #[error("mode {mode} has cutoff 0; every cutoff must be at least 1")]
    ZeroCutoff { mode: String },
    #[error("Hilbert-space dimension {dimension} exceeds the configured maximum {max} ({modes} modes)")]
    DimensionOverflow {
        dimension: String,
        max: u128,
        modes: usize,
    },
    #[error("mode {0} is not part of the layout")]
    UnknownMode(ModeId),
    #[error("occupation {occupation} of mode {mode} exceeds its cutoff {cutoff}")]
    OccupationExceedsCutoff {
        mode: ModeId,
        occupation: u32,
        cutoff: u32,
    },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("state norm {norm} differs from 1")]
    NotNormalized { norm: f64 },
    #[error("basis state with flat index {0} is not in this basis")]
    StateNotInBasis(u128),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModeRole {
    Share,
    Cash,
    Info,
    Reservoir,
}

/// Label of one bosonic mode: `s_j`, `c_j`, `i_j` or the `k`-th discrete
/// reservoir mode of trader `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeId {
    pub role: ModeRole,
    pub trader: u8,
    pub reservoir_index: Option<u32>,
}

impl ModeId {
    pub const fn share(trader: u8) -> Self {
        Self {
            role: ModeRole::Share,
            trader,
            reservoir_index: None,
        }
    }

    pub const fn cash(trader: u8) -> Self {
        Self {
            role: ModeRole::Cash,
            trader,
            reservoir_index: None,
        }
    }

    pub const fn info(trader: u8) -> Self {
        Self {
            role: ModeRole::Info,
            trader,
            reservoir_index: None,
        }
    }

    pub const fn reservoir(trader: u8, index: u32) -> Self {
        Self {
            role: ModeRole::Reservoir,
            trader,
            reservoir_index: Some(index),
        }
    }
}

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            ModeRole::Share => write!(f, "s{}", self.trader),
            ModeRole::Cash => write!(f, "c{}", self.trader),
            ModeRole::Info => write!(f, "i{}", self.trader),
            ModeRole::Reservoir => {
                write!(f, "r{}[{}]", self.trader, self.reservoir_index.unwrap_or(0))
            }
        }
    }
}

/// The six trader modes in canonical order.
pub const TRADER_MODES: [ModeId; 6] = [
    ModeId::share(1),
    ModeId::share(2),
    ModeId::cash(1),
    ModeId::cash(2),
    ModeId::info(1),
    ModeId::info(2),
];

/// Construction parameters for a [`ModeLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutSpec {
    /// Cutoffs of `s1, s2, c1, c2, i1, i2`.
    pub trader_cutoffs: [u32; 6],
    pub reservoir_modes_per_trader: usize,
    pub reservoir_cutoff: u32,
    pub max_dimension: u128,
}

impl LayoutSpec {
    pub fn new(
        trader_cutoffs: [u32; 6],
        reservoir_modes_per_trader: usize,
        reservoir_cutoff: u32,
    ) -> Self {
        Self {
            trader_cutoffs,
            reservoir_modes_per_trader,
            reservoir_cutoff,
            max_dimension: DEFAULT_MAX_DIMENSION,
        }
    }

    pub fn with_max_dimension(mut self, max_dimension: u128) -> Self {
        self.max_dimension = max_dimension;
        self
    }

    pub fn build(&self) -> Result<ModeLayout, FockError> {
        let mut modes = TRADER_MODES.to_vec();
        let mut cutoffs = self.trader_cutoffs.to_vec();
        for trader in 1..=2u8 {
            for k in 0..self.reservoir_modes_per_trader {
                modes.push(ModeId::reservoir(trader, k as u32));
                cutoffs.push(self.reservoir_cutoff);
            }
        }
        ModeLayout::new(modes, cutoffs, self.max_dimension)
    }
}

/// Canonical layout `s1, s2, c1, c2, i1, i2, r1[..], r2[..]` with the default
/// dimension ceiling.
pub fn build_layout(
    trader_cutoffs: [u32; 6],
    reservoir_modes_per_trader: usize,
    reservoir_cutoff: u32,
) -> Result<ModeLayout, FockError> {
    LayoutSpec::new(trader_cutoffs, reservoir_modes_per_trader, reservoir_cutoff).build()
}

/// Ordered modes with their cutoffs. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeLayout {
    modes: Vec<ModeId>,
    cutoffs: Vec<u32>,
    strides: Vec<u128>,
    dimension: u128,
    index: HashMap<ModeId, usize>,
}

impl ModeLayout {
    pub fn new(modes: Vec<ModeId>, cutoffs: Vec<u32>, max_dimension: u128) -> Result<Self, FockError> {
        assert_eq!(modes.len(), cutoffs.len(), "one cutoff per mode");
        if let Some(p) = cutoffs.iter().position(|&c| c == 0) {
            return Err(FockError::ZeroCutoff {
                mode: modes[p].to_string(),
            });
        }
        let mut index = HashMap::with_capacity(modes.len());
        for (i, m) in modes.iter().enumerate() {
            let prev = index.insert(*m, i);
            assert!(prev.is_none(), "duplicate mode {m} in layout");
        }

        let mut strides = vec![0u128; modes.len()];
        let mut dimension: Option<u128> = Some(1);
        for i in (0..modes.len()).rev() {
            strides[i] = dimension.unwrap_or(u128::MAX);
            dimension = dimension.and_then(|d| d.checked_mul(cutoffs[i] as u128 + 1));
        }
        let too_big = |dimension: String| FockError::DimensionOverflow {
            dimension,
            max: max_dimension,
            modes: modes.len(),
        };
        let dimension = dimension.ok_or_else(|| too_big("> 2^128".to_string()))?;
        if dimension > max_dimension {
            return Err(too_big(dimension.to_string()));
        }
        Ok(Self {
            modes,
            cutoffs,
            strides,
            dimension,
            index,
        })
    }

    pub fn modes(&self) -> &[ModeId] {
        &self.modes
    }

    pub fn cutoffs(&self) -> &[u32] {
        &self.cutoffs
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// `D = Π (N_m + 1)`.
    pub fn dimension(&self) -> u128 {
        self.dimension
    }

    pub fn index_of(&self, mode: ModeId) -> Result<usize, FockError> {
        self.index.get(&mode).copied().ok_or(FockError::UnknownMode(mode))
    }

    pub fn contains(&self, mode: ModeId) -> bool {
        self.index.contains_key(&mode)
    }

    pub fn cutoff(&self, mode: ModeId) -> Result<u32, FockError> {
        Ok(self.cutoffs[self.index_of(mode)?])
    }

    /// Number of discrete reservoir modes attached to `trader`.
    pub fn reservoir_modes(&self, trader: u8) -> Vec<usize> {
        self.modes
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == ModeRole::Reservoir && m.trader == trader)
            .map(|(i, _)| i)
            .collect()
    }

    /// All mode indices belonging to `trader` (shares, cash, info, reservoir).
    pub fn trader_modes(&self, trader: u8) -> Vec<usize> {
        self.modes
            .iter()
            .enumerate()
            .filter(|(_, m)| m.trader == trader)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn flat_index(&self, occupations: &[u32]) -> u128 {
        debug_assert_eq!(occupations.len(), self.modes.len());
        occupations
            .iter()
            .zip(&self.strides)
            .map(|(&n, &s)| n as u128 * s)
            .sum()
    }

    pub fn occupations_of(&self, flat: u128) -> Vec<u32> {
        let mut out = vec![0u32; self.modes.len()];
        let mut rest = flat;
        for i in 0..self.modes.len() {
            out[i] = (rest / self.strides[i]) as u32;
            rest %= self.strides[i];
        }
        out
    }

    pub fn stride(&self, mode_index: usize) -> u128 {
        self.strides[mode_index]
    }

    /// Validates an occupation vector against the cutoffs.
    pub fn check_occupations(&self, occupations: &[u32]) -> Result<(), FockError> {
        assert_eq!(occupations.len(), self.modes.len());
        for (i, &n) in occupations.iter().enumerate() {
            if n > self.cutoffs[i] {
                return Err(FockError::OccupationExceedsCutoff {
                    mode: self.modes[i],
                    occupation: n,
                    cutoff: self.cutoffs[i],
                });
            }
        }
        Ok(())
    }

    /// Full occupation vector from a sparse `(mode, occupation)` list; modes
    /// not listed (in particular the reservoir) are left empty.
    pub fn occupation_vector(&self, occupations: &[(ModeId, u32)]) -> Result<Vec<u32>, FockError> {
        let mut occ = vec![0u32; self.modes.len()];
        for &(mode, n) in occupations {
            let i = self.index_of(mode)?;
            occ[i] = n;
        }
        self.check_occupations(&occ)?;
        Ok(occ)
    }
}

/// Occupation numbers of one basis vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BasisState {
    pub occupations: Vec<u32>,
}

impl BasisState {
    pub fn new(layout: &ModeLayout, occupations: Vec<u32>) -> Result<Self, FockError> {
        layout.check_occupations(&occupations)?;
        Ok(Self { occupations })
    }

    pub fn flat_index(&self, layout: &ModeLayout) -> u128 {
        layout.flat_index(&self.occupations)
    }

    pub fn from_flat(layout: &ModeLayout, flat: u128) -> Self {
        Self {
            occupations: layout.occupations_of(flat),
        }
    }
}

/// An ordered set of basis states of a layout: either the whole truncated
/// space or a subset (e.g. a conserved sector), sorted by flat index.
#[derive(Clone, Debug)]
pub struct Basis {
    layout: ModeLayout,
    kind: BasisKind,
}

#[derive(Clone, Debug)]
enum BasisKind {
    Full,
    Subset {
        states: Vec<u128>,
        lookup: HashMap<u128, usize>,
    },
}

impl Basis {
    /// The full truncated space. Fails if the layout dimension does not fit in
    /// memory addressing.
    pub fn full(layout: &ModeLayout) -> Result<Self, FockError> {
        if layout.dimension() > usize::MAX as u128 || layout.dimension() > u64::MAX as u128 {
            return Err(FockError::DimensionOverflow {
                dimension: layout.dimension().to_string(),
                max: usize::MAX as u128,
                modes: layout.num_modes(),
            });
        }
        Ok(Self {
            layout: layout.clone(),
            kind: BasisKind::Full,
        })
    }

    /// Subset basis; `states` are flat indices, sorted and deduplicated here.
    pub fn subset(layout: &ModeLayout, mut states: Vec<u128>) -> Self {
        states.sort_unstable();
        states.dedup();
        let lookup = states.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        Self {
            layout: layout.clone(),
            kind: BasisKind::Subset { states, lookup },
        }
    }

    pub fn layout(&self) -> &ModeLayout {
        &self.layout
    }

    pub fn is_full(&self) -> bool {
        matches!(self.kind, BasisKind::Full)
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            BasisKind::Full => self.layout.dimension() as usize,
            BasisKind::Subset { states, .. } => states.len(),
        }
    }

    pub fn flat(&self, position: usize) -> u128 {
        match &self.kind {
            BasisKind::Full => position as u128,
            BasisKind::Subset { states, .. } => states[position],
        }
    }

    pub fn position(&self, flat: u128) -> Option<usize> {
        match &self.kind {
            BasisKind::Full => (flat < self.layout.dimension()).then_some(flat as usize),
            BasisKind::Subset { lookup, .. } => lookup.get(&flat).copied(),
        }
    }

    pub fn occupations(&self, position: usize) -> Vec<u32> {
        self.layout.occupations_of(self.flat(position))
    }

    /// Positions of this basis' states inside `outer` (which must contain them).
    pub fn positions_in(&self, outer: &Basis) -> Result<Vec<usize>, FockError> {
        (0..self.dim())
            .map(|p| {
                let f = self.flat(p);
                outer.position(f).ok_or(FockError::StateNotInBasis(f))
            })
            .collect()
    }

    /// Positions of states with `n_m < N_m` on every listed mode.
    pub fn interior(&self, mode_indices: &[usize]) -> Vec<usize> {
        let cut = self.layout.cutoffs();
        (0..self.dim())
            .filter(|&p| {
                let occ = self.occupations(p);
                mode_indices.iter().all(|&m| occ[m] < cut[m])
            })
            .collect()
    }

    /// Diagonal operator with entry `f(occupations)` on each basis state.
    pub fn diagonal<F: Fn(&[u32]) -> f64>(&self, f: F) -> SparseOperator {
        let diag: Vec<C64> = (0..self.dim())
            .map(|p| C64::new(f(&self.occupations(p)), 0.0))
            .collect();
        SparseOperator::diagonal(&diag)
    }

    /// Matrix of a normal-form operator polynomial on this basis. Images
    /// falling outside the basis are projected away.
    pub fn materialize(&self, sum: &OperatorSum) -> SparseOperator {
        let mut triplets = Vec::new();
        for col in 0..self.dim() {
            let occ = self.occupations(col);
            for (coeff, mono) in &sum.terms {
                if let Action::Hit(target, amp) = mono.apply(&occ, self.layout.cutoffs()) {
                    if let Some(row) = self.position(self.layout.flat_index(&target)) {
                        triplets.push((row, col, coeff * amp));
                    }
                }
            }
        }
        SparseOperator::from_triplets(self.dim(), triplets)
    }

    /// Flags the basis states on which some term of `sum` would raise an
    /// occupation past its cutoff with a non-vanishing amplitude, i.e. where
    /// the truncated operator differs from its untruncated counterpart.
    pub fn truncation_boundary(&self, sum: &OperatorSum) -> Vec<bool> {
        (0..self.dim())
            .map(|col| {
                let occ = self.occupations(col);
                sum.terms
                    .iter()
                    .any(|(c, m)| *c != ZERO && m.apply(&occ, self.layout.cutoffs()) == Action::Clipped)
            })
            .collect()
    }

    /// Unit vector on a single basis state.
    pub fn basis_vector(&self, occupations: &[u32]) -> Result<StateVector, FockError> {
        self.layout.check_occupations(occupations)?;
        let flat = self.layout.flat_index(occupations);
        let p = self.position(flat).ok_or(FockError::StateNotInBasis(flat))?;
        let mut amps = vec![ZERO; self.dim()];
        amps[p] = ONE;
        Ok(StateVector { amplitudes: amps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ladder {
    Lower(usize),
    Raise(usize),
}

/// Result of applying a monomial to a number state.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    /// Some lowering factor hit an empty mode.
    Zero,
    /// Non-vanishing in the untruncated space but pushed past a cutoff.
    Clipped,
    Hit(Vec<u32>, f64),
}

/// Product of ladder operators written left to right (`a b c` acts as
/// `a(b(c|ψ⟩))`), over mode indices of a layout.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Monomial(pub Vec<Ladder>);

impl Monomial {
    pub fn identity() -> Self {
        Monomial(Vec::new())
    }

    pub fn lower(mode: usize) -> Self {
        Monomial(vec![Ladder::Lower(mode)])
    }

    pub fn raise(mode: usize) -> Self {
        Monomial(vec![Ladder::Raise(mode)])
    }

    pub fn number(mode: usize) -> Self {
        Monomial(vec![Ladder::Raise(mode), Ladder::Lower(mode)])
    }

    /// `self · other`.
    pub fn then(&self, other: &Monomial) -> Monomial {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Monomial(v)
    }

    pub fn adjoint(&self) -> Monomial {
        Monomial(
            self.0
                .iter()
                .rev()
                .map(|l| match *l {
                    Ladder::Lower(m) => Ladder::Raise(m),
                    Ladder::Raise(m) => Ladder::Lower(m),
                })
                .collect(),
        )
    }

    pub fn apply(&self, occupations: &[u32], cutoffs: &[u32]) -> Action {
        let mut occ = occupations.to_vec();
        let mut amp = 1.0f64;
        let mut clipped = false;
        for l in self.0.iter().rev() {
            match *l {
                Ladder::Lower(m) => {
                    if occ[m] == 0 {
                        return Action::Zero;
                    }
                    amp *= (occ[m] as f64).sqrt();
                    occ[m] -= 1;
                }
                Ladder::Raise(m) => {
                    if occ[m] >= cutoffs[m] {
                        clipped = true;
                    }
                    occ[m] += 1;
                    amp *= (occ[m] as f64).sqrt();
                }
            }
        }
        if clipped {
            Action::Clipped
        } else {
            Action::Hit(occ, amp)
        }
    }
}

/// Linear combination of monomials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OperatorSum {
    pub terms: Vec<(C64, Monomial)>,
}

impl OperatorSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, coeff: C64, mono: Monomial) -> &mut Self {
        self.terms.push((coeff, mono));
        self
    }

    pub fn extend(&mut self, other: &OperatorSum) -> &mut Self {
        self.terms.extend(other.terms.iter().cloned());
        self
    }

    /// Term-wise hermitian conjugate.
    pub fn adjoint(&self) -> OperatorSum {
        OperatorSum {
            terms: self.terms.iter().map(|(c, m)| (c.conj(), m.adjoint())).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Complex sparse matrix in compressed-row form. Rows are visited in order,
/// columns sorted within a row, no duplicates, no stored exact zeros (or
/// entries at or below the drop tolerance it was built with).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

fn check_dims(a: usize, b: usize) -> Result<(), FockError> {
    if a != b {
        return Err(FockError::DimensionMismatch { left: a, right: b });
    }
    Ok(())
}

impl SparseOperator {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            row_ptr: vec![0; dim + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![ONE; dim])
    }

    pub fn diagonal(diag: &[C64]) -> Self {
        Self::from_triplets(
            diag.len(),
            diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect(),
        )
    }

    /// Builds from `(row, col, value)` triplets, summing duplicates and dropping
    /// exact zeros.
    pub fn from_triplets(dim: usize, triplets: Vec<(usize, usize, C64)>) -> Self {
        Self::from_triplets_with_tolerance(dim, triplets, 0.0)
    }

    /// As [`from_triplets`](Self::from_triplets), dropping entries with
    /// `|v| <= drop_tol`.
    pub fn from_triplets_with_tolerance(
        dim: usize,
        mut triplets: Vec<(usize, usize, C64)>,
        drop_tol: f64,
    ) -> Self {
        // Stable: duplicates are summed in insertion order, deterministically.
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut rows = Vec::with_capacity(triplets.len());
        let mut iter = triplets.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            assert!(r < dim && c < dim, "entry ({r},{c}) outside dimension {dim}");
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            if v.norm() > drop_tol {
                rows.push(r);
                cols.push(c);
                vals.push(v);
            }
        }
        for &r in &rows {
            row_ptr[r + 1] += 1;
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            dim,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_zero(&self) -> bool {
        self.vals.is_empty()
    }

    /// Row-major iteration over stored entries.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        match self.cols[lo..hi].binary_search(&c) {
            Ok(k) => self.vals[lo + k],
            Err(_) => ZERO,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, FockError> {
        self.axpby(ONE, other, ONE)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FockError> {
        self.axpby(ONE, other, -ONE)
    }

    /// `a·self + b·other`.
    pub fn axpby(&self, a: C64, other: &Self, b: C64) -> Result<Self, FockError> {
        check_dims(self.dim, other.dim)?;
        let mut t: Vec<(usize, usize, C64)> = Vec::with_capacity(self.nnz() + other.nnz());
        t.extend(self.entries().map(|(r, c, v)| (r, c, a * v)));
        t.extend(other.entries().map(|(r, c, v)| (r, c, b * v)));
        Ok(Self::from_triplets(self.dim, t))
    }

    pub fn scale(&self, z: C64) -> Self {
        let mut out = self.clone();
        for v in &mut out.vals {
            *v *= z;
        }
        if z == ZERO {
            return Self::zero(self.dim);
        }
        out
    }

    /// `self · other`, row-by-row accumulation.
    pub fn multiply(&self, other: &Self) -> Result<Self, FockError> {
        check_dims(self.dim, other.dim)?;
        let n = self.dim;
        let mut acc = vec![ZERO; n];
        let mut touched = vec![false; n];
        let mut pattern: Vec<usize> = Vec::new();
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for r in 0..n {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        pattern.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            pattern.sort_unstable();
            for &c in &pattern {
                let v = acc[c];
                if v != ZERO {
                    cols.push(c);
                    vals.push(v);
                }
                acc[c] = ZERO;
                touched[c] = false;
            }
            pattern.clear();
            row_ptr[r + 1] = cols.len();
        }
        Ok(Self {
            dim: n,
            row_ptr,
            cols,
            vals,
        })
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_triplets(
            self.dim,
            self.entries().map(|(r, c, v)| (c, r, v.conj())).collect(),
        )
    }

    /// `[A, B] = AB − BA`.
    pub fn commutator(&self, other: &Self) -> Result<Self, FockError> {
        self.multiply(other)?.sub(&other.multiply(self)?)
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise deviation `max |A_rc − B_rc|`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, FockError> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn hermiticity_defect(&self) -> f64 {
        self.max_abs_diff(&self.adjoint()).expect("same dimension")
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_defect() <= tol
    }

    /// Principal submatrix on `positions` (in the given order).
    pub fn restrict(&self, positions: &[usize]) -> Self {
        let mut map = HashMap::with_capacity(positions.len());
        for (i, &p) in positions.iter().enumerate() {
            map.insert(p, i);
        }
        let mut t = Vec::new();
        for (i, &p) in positions.iter().enumerate() {
            for (c, v) in self.row(p) {
                if let Some(&j) = map.get(&c) {
                    t.push((i, j, v));
                }
            }
        }
        Self::from_triplets(positions.len(), t)
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector, FockError> {
        check_dims(self.dim, psi.dim())?;
        let mut out = vec![ZERO; self.dim];
        self.apply_into(&psi.amplitudes, &mut out);
        Ok(StateVector { amplitudes: out })
    }

    /// `out = A x` on raw slices.
    pub fn apply_into(&self, x: &[C64], out: &mut [C64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *o = s;
        }
    }

    /// `⟨ψ|A|ψ⟩`.
    pub fn expectation(&self, psi: &StateVector) -> Result<C64, FockError> {
        check_dims(self.dim, psi.dim())?;
        Ok(self.expectation_raw(&psi.amplitudes))
    }

    pub fn expectation_raw(&self, x: &[C64]) -> C64 {
        let mut total = ZERO;
        for (r, xr) in x.iter().enumerate() {
            let mut s = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            total += xr.conj() * s;
        }
        total
    }

    /// Diagonal entries (for operators known to be diagonal).
    pub fn diagonal_values(&self) -> Vec<C64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }
}

/// Normalized (or about to be) vector of amplitudes over a basis.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub amplitudes: Vec<C64>,
}

impl StateVector {
    pub fn new(amplitudes: Vec<C64>) -> Self {
        Self { amplitudes }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> Result<C64, FockError> {
        check_dims(self.dim(), other.dim())?;
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    pub fn check_normalized(&self, tol: f64) -> Result<(), FockError> {
        let norm = self.norm();
        if (norm - 1.0).abs() > tol {
            return Err(FockError::NotNormalized { norm });
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.amplitudes.iter().all(|a| *a == ZERO)
    }

    /// Components on `positions`, in order.
    pub fn restrict(&self, positions: &[usize]) -> StateVector {
        StateVector {
            amplitudes: positions.iter().map(|&p| self.amplitudes[p]).collect(),
        }
    }
}

/// `a_m` on the full space of `layout`.
pub fn annihilator(layout: &ModeLayout, mode: ModeId) -> Result<SparseOperator, FockError> {
    let m = layout.index_of(mode)?;
    ladder_matrix(layout, m, Ladder::Lower(m))
}

/// `a_m†` on the full space of `layout`.
pub fn creator(layout: &ModeLayout, mode: ModeId) -> Result<SparseOperator, FockError> {
    let m = layout.index_of(mode)?;
    ladder_matrix(layout, m, Ladder::Raise(m))
}

fn ladder_matrix(layout: &ModeLayout, m: usize, l: Ladder) -> Result<SparseOperator, FockError> {
    let basis = Basis::full(layout)?;
    let stride = layout.stride(m) as usize;
    let cut = layout.cutoffs()[m];
    let mut t = Vec::new();
    for col in 0..basis.dim() {
        let n = (col / stride) as u32 % (cut + 1);
        match l {
            Ladder::Lower(_) if n > 0 => t.push((col - stride, col, C64::new((n as f64).sqrt(), 0.0))),
            Ladder::Raise(_) if n < cut => {
                t.push((col + stride, col, C64::new(((n + 1) as f64).sqrt(), 0.0)))
            }
            _ => {}
        }
    }
    Ok(SparseOperator::from_triplets(basis.dim(), t))
}

/// `n̂_m = a_m† a_m` on the full space.
pub fn number_operator(layout: &ModeLayout, mode: ModeId) -> Result<SparseOperator, FockError> {
    let m = layout.index_of(mode)?;
    Ok(Basis::full(layout)?.diagonal(|occ| occ[m] as f64))
}

/// Projector on the states with `n_m = N_m`.
pub fn top_level_projector(layout: &ModeLayout, mode: ModeId) -> Result<SparseOperator, FockError> {
    let m = layout.index_of(mode)?;
    let cut = layout.cutoffs()[m];
    Ok(Basis::full(layout)?.diagonal(|occ| if occ[m] == cut { 1.0 } else { 0.0 }))
}

/// Number eigenstate on the full space; unlisted modes are empty.
pub fn number_state(layout: &ModeLayout, occupations: &[(ModeId, u32)]) -> Result<StateVector, FockError> {
    let occ = layout.occupation_vector(occupations)?;
    Basis::full(layout)?.basis_vector(&occ)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_mode(cutoff: u32) -> ModeLayout {
        ModeLayout::new(vec![ModeId::share(1)], vec![cutoff], DEFAULT_MAX_DIMENSION).unwrap()
    }

    #[test]
    fn layout_dimensions() {
        assert_eq!(build_layout([1; 6], 0, 1).unwrap().dimension(), 64);
        assert_eq!(build_layout([3; 6], 0, 1).unwrap().dimension(), 4096);
        assert_eq!(build_layout([1; 6], 2, 1).unwrap().dimension(), 1024);
    }

    #[test]
    fn zero_cutoff_rejected() {
        let err = build_layout([1, 1, 0, 1, 1, 1], 0, 1).unwrap_err();
        assert!(matches!(err, FockError::ZeroCutoff { ref mode } if mode == "c1"));
        assert!(build_layout([1; 6], 1, 0).is_err());
    }

    #[test]
    fn overflow_reports_size() {
        let err = build_layout([3; 6], 10, 3).unwrap_err();
        match err {
            FockError::DimensionOverflow { dimension, max, modes } => {
                assert_eq!(dimension, (1u128 << 52).to_string());
                assert_eq!(max, DEFAULT_MAX_DIMENSION);
                assert_eq!(modes, 26);
            }
            e => panic!("unexpected {e}"),
        }
        // A raised ceiling admits layouts that are only ever used sector-wise.
        let big = LayoutSpec::new([1; 6], 32, 1).with_max_dimension(u128::MAX).build().unwrap();
        assert_eq!(big.dimension(), 1u128 << 70);
    }

    #[test]
    fn canonical_order() {
        let l = build_layout([1; 6], 2, 1).unwrap();
        let names: Vec<String> = l.modes().iter().map(|m| m.to_string()).collect();
        assert_eq!(
            names,
            ["s1", "s2", "c1", "c2", "i1", "i2", "r1[0]", "r1[1]", "r2[0]", "r2[1]"]
        );
    }

    #[test]
    fn flat_index_round_trip() {
        let l = build_layout([2, 1, 3, 1, 2, 1], 1, 2).unwrap();
        for flat in 0..l.dimension() {
            let occ = l.occupations_of(flat);
            assert_eq!(l.flat_index(&occ), flat);
        }
    }

    #[test]
    fn single_mode_ladder_entries() {
        let l = single_mode(2);
        let a = annihilator(&l, ModeId::share(1)).unwrap();
        let e: Vec<_> = a.entries().collect();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].0, e[0].1), (0, 1));
        assert_eq!(e[0].2, ONE);
        assert_eq!((e[1].0, e[1].1), (1, 2));
        assert!((e[1].2.re - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn annihilator_kills_vacuum() {
        let l = build_layout([2; 6], 0, 1).unwrap();
        let vac = number_state(&l, &[]).unwrap();
        for m in TRADER_MODES {
            assert!(annihilator(&l, m).unwrap().apply(&vac).unwrap().is_zero());
        }
    }

    #[test]
    fn number_operator_diagonal() {
        let l = single_mode(3);
        let n = number_operator(&l, ModeId::share(1)).unwrap();
        let d: Vec<f64> = n.diagonal_values().iter().map(|z| z.re).collect();
        assert_eq!(d, [0.0, 1.0, 2.0, 3.0]);
        assert_eq!(n.nnz(), 3);
    }

    #[test]
    fn number_equals_adag_a() {
        let l = build_layout([2, 1, 3, 1, 1, 2], 0, 1).unwrap();
        for m in TRADER_MODES {
            let a = annihilator(&l, m).unwrap();
            let n = number_operator(&l, m).unwrap();
            // √n·√n reproduces n up to one rounding of the square root.
            assert!(a.adjoint().multiply(&a).unwrap().max_abs_diff(&n).unwrap() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn truncated_ccr_single_mode() {
        for cutoff in 1..=5 {
            let l = single_mode(cutoff);
            let a = annihilator(&l, ModeId::share(1)).unwrap();
            let comm = a.commutator(&a.adjoint()).unwrap();
            let expected = SparseOperator::identity(l.dimension() as usize)
                .sub(&top_level_projector(&l, ModeId::share(1)).unwrap().scale(C64::new((cutoff + 1) as f64, 0.0)))
                .unwrap();
            assert!(comm.max_abs_diff(&expected).unwrap() < 1e-14);
        }
    }

    #[test]
    fn cross_mode_commutators_vanish() {
        let l = build_layout([1; 6], 0, 1).unwrap();
        let s1 = annihilator(&l, ModeId::share(1)).unwrap();
        let c1 = annihilator(&l, ModeId::cash(1)).unwrap();
        assert!(s1.commutator(&c1.adjoint()).unwrap().is_zero());
        assert!(s1.commutator(&c1).unwrap().is_zero());
    }

    #[test]
    fn algebra_basics() {
        let l = build_layout([2, 1, 1, 1, 1, 1], 0, 1).unwrap();
        let a = annihilator(&l, ModeId::share(1))
            .unwrap()
            .add(&creator(&l, ModeId::cash(2)).unwrap().scale(C64::new(0.3, -1.2)))
            .unwrap();
        assert!(a.commutator(&a).unwrap().is_zero());
        assert_eq!(a.adjoint().adjoint(), a);
        let other = SparseOperator::zero(3);
        assert!(matches!(a.add(&other), Err(FockError::DimensionMismatch { .. })));
        assert!(a.multiply(&other).is_err());
    }

    #[test]
    fn expectation_values() {
        let l = build_layout([3; 6], 0, 1).unwrap();
        let psi = number_state(&l, &[(ModeId::share(1), 2), (ModeId::cash(1), 1)]).unwrap();
        let n = number_operator(&l, ModeId::share(1)).unwrap();
        assert_eq!(n.expectation(&psi).unwrap(), C64::new(2.0, 0.0));
        let a = annihilator(&l, ModeId::share(1)).unwrap();
        assert_eq!(a.expectation(&psi).unwrap(), ZERO);
        let k = number_operator(&l, ModeId::cash(1)).unwrap();
        assert_eq!(n.add(&k).unwrap().expectation(&psi).unwrap().re, 3.0);
        let bad = StateVector::new(vec![ONE; 5]);
        assert!(n.expectation(&bad).is_err());
        assert!(n.apply(&bad).is_err());
    }

    #[test]
    fn number_state_checks() {
        let l = build_layout([1; 6], 1, 1).unwrap();
        let occ = [
            (ModeId::share(1), 1),
            (ModeId::cash(1), 1),
            (ModeId::info(1), 1),
        ];
        let psi = number_state(&l, &occ).unwrap();
        assert_eq!(psi.norm(), 1.0);
        let err = number_state(&l, &[(ModeId::share(2), 2)]).unwrap_err();
        assert!(matches!(err, FockError::OccupationExceedsCutoff { occupation: 2, cutoff: 1, .. }));
        let err = number_state(&l, &[(ModeId::reservoir(1, 5), 1)]).unwrap_err();
        assert!(matches!(err, FockError::UnknownMode(_)));
    }

    #[test]
    fn unknown_mode_rejected() {
        let l = build_layout([1; 6], 0, 1).unwrap();
        assert!(annihilator(&l, ModeId::reservoir(1, 0)).is_err());
        assert!(number_operator(&l, ModeId::reservoir(2, 0)).is_err());
    }

    #[test]
    fn monomial_matches_matrix_product() {
        let l = build_layout([2, 2, 2, 1, 1, 1], 0, 1).unwrap();
        let basis = Basis::full(&l).unwrap();
        let (s1, s2, c1) = (0, 1, 2);
        // s1 c1† s2† (raise then lower patterns crossing the cutoff)
        let mono = Monomial(vec![Ladder::Lower(s1), Ladder::Raise(c1), Ladder::Raise(s2)]);
        let mut sum = OperatorSum::new();
        sum.push(ONE, mono);
        let via_mono = basis.materialize(&sum);
        let prod = annihilator(&l, ModeId::share(1))
            .unwrap()
            .multiply(&creator(&l, ModeId::cash(1)).unwrap())
            .unwrap()
            .multiply(&creator(&l, ModeId::share(2)).unwrap())
            .unwrap();
        assert_eq!(via_mono.max_abs_diff(&prod).unwrap(), 0.0);
    }

    #[test]
    fn boundary_flags_only_clipped_raises() {
        let l = single_mode(2);
        let basis = Basis::full(&l).unwrap();
        let mut sum = OperatorSum::new();
        sum.push(ONE, Monomial::raise(0));
        assert_eq!(basis.truncation_boundary(&sum), [false, false, true]);
        let mut num = OperatorSum::new();
        num.push(ONE, Monomial::number(0));
        assert_eq!(basis.truncation_boundary(&num), [false, false, false]);
    }

    #[test]
    fn restrict_extracts_submatrix() {
        let l = single_mode(3);
        let a = annihilator(&l, ModeId::share(1)).unwrap();
        let r = a.restrict(&[1, 2]);
        assert_eq!(r.dim(), 2);
        assert!((r.get(0, 1).re - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.nnz(), 1);
    }

    #[test]
    fn drop_tolerance() {
        let t = vec![(0, 0, C64::new(1e-9, 0.0)), (1, 1, ONE), (0, 0, ZERO)];
        assert_eq!(SparseOperator::from_triplets(2, t.clone()).nnz(), 2);
        assert_eq!(SparseOperator::from_triplets_with_tolerance(2, t, 1e-6).nnz(), 1);
    }
}
