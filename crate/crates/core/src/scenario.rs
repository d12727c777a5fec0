//! Scenario configuration (JSON) and the crate-level error type.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fock::{FockError, LayoutSpec, ModeLayout, DEFAULT_MAX_DIMENSION};
use crate::model::{InitialOccupations, ModelError, ModelParams, ReservoirGrid};
use crate::perturb::{PerturbError, PerturbInputs};
use crate::propagate::{Engine, EvolveOptions, Method, OdeOptions, PropagateError};

/// Failure category; the command-line front end maps each to an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or inconsistent configuration.
    Config,
    /// Valid configuration violating a model precondition.
    Precondition,
    /// A numerical guard tripped during a run.
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("numerical guard: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Precondition(_) => ErrorKind::Precondition,
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Io(_) => ErrorKind::Io,
        }
    }
}

impl From<FockError> for Error {
    fn from(e: FockError) -> Self {
        match e {
            FockError::DimensionOverflow { .. } => Error::Precondition(e.to_string()),
            FockError::NotNormalized { .. } => Error::Numerical(e.to_string()),
            _ => Error::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Fock(f) => f.into(),
            ModelError::ZeroDispersion(_) => Error::Precondition(e.to_string()),
            _ => Error::Config(e.to_string()),
        }
    }
}

impl From<PropagateError> for Error {
    fn from(e: PropagateError) -> Self {
        match e {
            PropagateError::Fock(f) => f.into(),
            PropagateError::Model(m) => m.into(),
            PropagateError::SectorTooLarge { .. } => Error::Precondition(e.to_string()),
            PropagateError::LeakageExceeded { .. }
            | PropagateError::NormDrift { .. }
            | PropagateError::StepTooLarge { .. } => Error::Numerical(e.to_string()),
            _ => Error::Config(e.to_string()),
        }
    }
}

impl From<PerturbError> for Error {
    fn from(e: PerturbError) -> Self {
        match e {
            PerturbError::Model(m) => m.into(),
            PerturbError::Fock(f) => f.into(),
            PerturbError::Propagate(p) => p.into(),
            PerturbError::Quadrature { .. } => Error::Numerical(e.to_string()),
            _ => Error::Precondition(e.to_string()),
        }
    }
}

/// Occupation cutoffs per mode class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cutoffs {
    pub share: u32,
    pub cash: u32,
    pub info: u32,
    pub reservoir: u32,
    /// Ceiling on the full product-space dimension.
    #[serde(default = "default_max_dimension")]
    pub max_dimension: u64,
}

fn default_max_dimension() -> u64 {
    DEFAULT_MAX_DIMENSION as u64
}

/// Midpoint reservoir grid on `[-window, window]`, the same for both traders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirSpec {
    pub window: f64,
    pub nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t_max: f64,
    pub samples: usize,
}

impl TimeGrid {
    /// `samples` equally spaced times from 0 to `t_max` inclusive.
    pub fn times(&self) -> Vec<f64> {
        let n = self.samples - 1;
        (0..=n).map(|k| self.t_max * k as f64 / n as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Norm tolerance of the exact propagator.
    #[serde(default = "Tolerances::default_propagation")]
    pub propagation: f64,
    #[serde(default = "Tolerances::default_leakage")]
    pub leakage: f64,
    #[serde(default = "Tolerances::default_leakage_warning")]
    pub leakage_warning: f64,
    /// Nominal RK4 step of the Heisenberg oracle.
    #[serde(default = "Tolerances::default_ode_step")]
    pub ode_step: f64,
    /// Largest accepted observable change under step halving.
    #[serde(default = "Tolerances::default_ode_drift")]
    pub ode_drift: f64,
}

impl Tolerances {
    fn default_propagation() -> f64 {
        1e-10
    }
    fn default_leakage() -> f64 {
        1e-6
    }
    fn default_leakage_warning() -> f64 {
        1e-9
    }
    fn default_ode_step() -> f64 {
        0.25
    }
    fn default_ode_drift() -> f64 {
        1e-8
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            propagation: Self::default_propagation(),
            leakage: Self::default_leakage(),
            leakage_warning: Self::default_leakage_warning(),
            ode_step: Self::default_ode_step(),
            ode_drift: Self::default_ode_drift(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConservationSpec {
    /// Trade coupling of the companion run without information
    /// (`λ_inf = γ = 0`).
    pub no_information_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSpec {
    /// Geometric ladder of `λ = λ_inf` values.
    pub epsilons: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingSpec {
    /// Reservoir node counts per trader; the window grows with the count.
    pub grid_sizes: Vec<usize>,
    /// Fixed spacing `Δq` of the midpoint grid.
    pub node_spacing: f64,
    pub t_max: f64,
    pub samples: usize,
}

/// Harness suites run by `compare`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conservation: Option<ConservationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<DampingSpec>,
}

/// Scalar scenario inputs a sweep axis may vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepField {
    OmegaS1,
    OmegaS2,
    OmegaC1,
    OmegaC2,
    Omega1,
    Omega2,
    /// Sets `λ` and `λ_inf` together.
    Lambda,
    Gamma1,
    Gamma2,
    OmegaR1,
    OmegaR2,
    #[serde(rename = "I1")]
    I1,
    #[serde(rename = "I2")]
    I2,
}

impl SweepField {
    pub fn label(self) -> &'static str {
        match self {
            SweepField::OmegaS1 => "omega_s1",
            SweepField::OmegaS2 => "omega_s2",
            SweepField::OmegaC1 => "omega_c1",
            SweepField::OmegaC2 => "omega_c2",
            SweepField::Omega1 => "omega1",
            SweepField::Omega2 => "omega2",
            SweepField::Lambda => "lambda",
            SweepField::Gamma1 => "gamma1",
            SweepField::Gamma2 => "gamma2",
            SweepField::OmegaR1 => "omega_r1",
            SweepField::OmegaR2 => "omega_r2",
            SweepField::I1 => "I1",
            SweepField::I2 => "I2",
        }
    }

    /// Writes `value` into the field; occupations must be non-negative integers.
    pub fn apply(self, params: &mut ModelParams, init: &mut InitialOccupations, value: f64) -> Result<(), Error> {
        let occupation = |v: f64| -> Result<u32, Error> {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::Config(format!("sweep value {v} for {} is not a non-negative integer", self.label())))
            }
        };
        match self {
            SweepField::OmegaS1 => params.omega_s[0] = value,
            SweepField::OmegaS2 => params.omega_s[1] = value,
            SweepField::OmegaC1 => params.omega_c[0] = value,
            SweepField::OmegaC2 => params.omega_c[1] = value,
            SweepField::Omega1 => params.omega[0] = value,
            SweepField::Omega2 => params.omega[1] = value,
            SweepField::Lambda => {
                params.lambda = value;
                params.lambda_inf = value;
            }
            SweepField::Gamma1 => params.gamma[0] = value,
            SweepField::Gamma2 => params.gamma[1] = value,
            SweepField::OmegaR1 => params.omega_r[0] = value,
            SweepField::OmegaR2 => params.omega_r[1] = value,
            SweepField::I1 => init.i[0] = occupation(value)?,
            SweepField::I2 => init.i[1] = occupation(value)?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub field: SweepField,
    pub values: Vec<f64>,
}

/// Cartesian product of axes; the first axis varies slowest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: Vec<SweepAxis>,
}

impl SweepSpec {
    pub fn cells(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Axis values of cell `index` (row-major, last axis fastest).
    pub fn cell(&self, mut index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            let n = axis.values.len();
            out[k] = axis.values[index % n];
            index /= n;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub params: ModelParams,
    pub initial: InitialOccupations,
    pub cutoffs: Cutoffs,
    pub reservoir: ReservoirSpec,
    pub time: TimeGrid,
    pub engines: Vec<Engine>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn finite(name: &str, v: f64) -> Result<(), Error> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} is not finite")))
    }
}

impl Scenario {
    /// Parses and validates; parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let s: Scenario = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Structural checks: finiteness, positive grids, occupations within
    /// cutoffs. Model preconditions are checked where they are needed.
    pub fn validate(&self) -> Result<(), Error> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name {:?} must be non-empty and contain no path separators", self.name)));
        }
        self.params.validate()?;
        if !self.params.reservoir_grid.is_empty() {
            return Err(Error::Config(
                "params.reservoir_grid is derived from `reservoir`; leave it out".into(),
            ));
        }
        let c = &self.cutoffs;
        for (name, v) in [("share", c.share), ("cash", c.cash), ("info", c.info), ("reservoir", c.reservoir)] {
            if v == 0 {
                return Err(Error::Config(format!("cutoffs.{name} must be at least 1")));
            }
        }
        let init = &self.initial;
        for j in 0..2 {
            for (name, occ, cut) in [("n", init.n[j], c.share), ("k", init.k[j], c.cash), ("i", init.i[j], c.info)] {
                if occ > cut {
                    return Err(Error::Config(format!(
                        "initial.{name}[{j}] = {occ} exceeds cutoff {cut}"
                    )));
                }
            }
        }
        finite("reservoir.window", self.reservoir.window)?;
        if self.reservoir.nodes > 0 && !(self.reservoir.window > 0.0) {
            return Err(Error::Config("reservoir.window must be positive".into()));
        }
        finite("time.t_max", self.time.t_max)?;
        if !(self.time.t_max > 0.0) || self.time.samples < 2 {
            return Err(Error::Config("time needs t_max > 0 and at least 2 samples".into()));
        }
        if self.engines.is_empty() {
            return Err(Error::Config("engines must not be empty".into()));
        }
        let mut seen = self.engines.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.engines.len() {
            return Err(Error::Config("engines contains duplicates".into()));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("propagation", t.propagation),
            ("leakage", t.leakage),
            ("leakage_warning", t.leakage_warning),
            ("ode_step", t.ode_step),
            ("ode_drift", t.ode_drift),
        ] {
            finite(&format!("tolerances.{name}"), v)?;
            if !(v > 0.0) {
                return Err(Error::Config(format!("tolerances.{name} must be positive")));
            }
        }
        if let Some(cmp) = &self.compare {
            if let Some(cons) = &cmp.conservation {
                finite("compare.conservation.no_information_lambda", cons.no_information_lambda)?;
            }
            if let Some(sc) = &cmp.scaling {
                if sc.epsilons.iter().any(|e| !e.is_finite() || *e < 0.0) {
                    return Err(Error::Config("compare.scaling.epsilons must be finite and non-negative".into()));
                }
            }
            if let Some(d) = &cmp.damping {
                finite("compare.damping.node_spacing", d.node_spacing)?;
                finite("compare.damping.t_max", d.t_max)?;
                if d.grid_sizes.is_empty() || d.grid_sizes.contains(&0) || !(d.node_spacing > 0.0) || !(d.t_max > 0.0) || d.samples < 2 {
                    return Err(Error::Config(
                        "compare.damping needs non-empty positive grid sizes, node_spacing > 0, t_max > 0, samples ≥ 2".into(),
                    ));
                }
            }
        }
        if let Some(sw) = &self.sweep {
            for axis in &sw.axes {
                if axis.values.is_empty() {
                    return Err(Error::Config(format!("sweep axis {} has no values", axis.field.label())));
                }
                for &v in &axis.values {
                    finite(axis.field.label(), v)?;
                    axis.field.apply(&mut self.params.clone(), &mut self.initial.clone(), v)?;
                }
            }
        }
        Ok(())
    }

    pub fn layout_spec(&self) -> LayoutSpec {
        let c = &self.cutoffs;
        LayoutSpec::new([c.share, c.share, c.cash, c.cash, c.info, c.info], self.reservoir.nodes, c.reservoir)
            .with_max_dimension(c.max_dimension as u128)
    }

    pub fn layout(&self) -> Result<ModeLayout, Error> {
        Ok(self.layout_spec().build()?)
    }

    /// Parameters with the reservoir grid filled in from `reservoir`.
    pub fn model_params(&self) -> ModelParams {
        let mut p = self.params.clone();
        p.reservoir_grid = if self.reservoir.nodes == 0 {
            ReservoirGrid::default()
        } else {
            ReservoirGrid::midpoint(self.reservoir.window, self.reservoir.nodes)
        };
        p
    }

    pub fn times(&self) -> Vec<f64> {
        self.time.times()
    }

    pub fn evolve_options(&self) -> EvolveOptions {
        EvolveOptions {
            tol: self.tolerances.propagation,
            leakage_threshold: self.tolerances.leakage,
            leakage_warning: self.tolerances.leakage_warning,
            method: Method::Auto,
        }
    }

    pub fn ode_options(&self) -> OdeOptions {
        OdeOptions {
            step: self.tolerances.ode_step,
            tol: self.tolerances.ode_drift,
        }
    }

    pub fn perturb_inputs(&self) -> Result<PerturbInputs, Error> {
        Ok(PerturbInputs::new(self.params.clone(), self.initial)?)
    }
}
