//! Cross-engine validation suites and their report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fock::LayoutSpec;
use crate::model::{
    interior_projection, portfolio_commutator_closed_form, raised_modes, HamiltonianTerms, InitialOccupations,
    ModelOperators, ModelParams, ReservoirGrid,
};
use crate::perturb::{perturbative_series, PerturbInputs};
use crate::propagate::{
    evolve_exact, integrate_heisenberg_with_drift, EvolveOptions, Engine, Record, Sector, TimeSeries,
};
use crate::scenario::{DampingSpec, Error, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Inconclusive => "INCONCLUSIVE",
        }
    }
}

/// One verified property with the measured value and its bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub engines: [Engine; 2],
    pub observable: String,
    pub max_abs: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub m_drift: [f64; 2],
    pub max_leakage: f64,
    pub portfolio_drift_without_information: [f64; 2],
    pub share_variation_without_information: [f64; 2],
    pub cash_variation_without_information: [f64; 2],
    pub commutator_residual: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub epsilon: f64,
    pub window: f64,
    pub max_error: f64,
    pub max_delta_pi: f64,
    /// Largest observable change of the oracle under step halving.
    pub oracle_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub error_slope: f64,
    pub error_residual: f64,
    pub delta_pi_slope: f64,
    pub delta_pi_residual: f64,
    pub error_monotone: bool,
    pub oracle_resolved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampingRow {
    pub nodes: usize,
    pub window: f64,
    pub rate: Option<f64>,
    pub relative_error: Option<f64>,
    pub fit_points: usize,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampingReport {
    /// Population rate `2πγ₁²/Ω₁^(r)`.
    pub target_rate: f64,
    /// Amplitude rate `πγ₁²/Ω₁^(r)`.
    pub amplitude_rate: f64,
    pub rows: Vec<DampingRow>,
    pub monotone: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: String,
    pub checks: Vec<Check>,
    pub deviations: Vec<Deviation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conservation: Option<ConservationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub damping: Option<DampingReport>,
}

impl ComparisonReport {
    fn new(scenario: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            ..Default::default()
        }
    }

    fn check(&mut self, name: &str, measured: f64, bound: &str, status: Status, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            measured,
            bound: bound.to_string(),
            status,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == Status::Pass)
    }

    pub fn merge(&mut self, other: ComparisonReport) {
        self.checks.extend(other.checks);
        self.deviations.extend(other.deviations);
        self.conservation = self.conservation.take().or(other.conservation);
        self.scaling = self.scaling.take().or(other.scaling);
        self.damping = self.damping.take().or(other.damping);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let mut out = format!("scenario {}\n", self.scenario);
        for c in &self.checks {
            out.push_str(&format!(
                "{:<13} {:<40} measured {:.6e} (bound {}) {}\n",
                c.status.label(),
                c.name,
                c.measured,
                c.bound,
                c.detail
            ));
        }
        for d in &self.deviations {
            out.push_str(&format!(
                "deviation {}-{} {:<6} max {:.6e} rms {:.6e}\n",
                d.engines[0].label(),
                d.engines[1].label(),
                d.observable,
                d.max_abs,
                d.rms
            ));
        }
        out
    }
}

/// Exact evolution of the scenario's initial number state inside its
/// conserved sector.
pub fn run_exact(scenario: &Scenario, params: &ModelParams, opts: &EvolveOptions) -> Result<TimeSeries, Error> {
    let layout = scenario.layout()?;
    let sector = Sector::of_initial(&layout, &scenario.initial)?;
    let ops = ModelOperators::on_basis(&sector.basis, params)?;
    let occ = layout.occupation_vector(&scenario.initial.mode_list())?;
    let psi0 = sector.basis.basis_vector(&occ)?;
    Ok(evolve_exact(&ops, &psi0, &scenario.times(), opts)?)
}

pub fn run_engine(scenario: &Scenario, engine: Engine) -> Result<TimeSeries, Error> {
    match engine {
        Engine::Exact => run_exact(scenario, &scenario.model_params(), &scenario.evolve_options()),
        Engine::HeisenbergOde => {
            let layout = scenario.layout()?;
            let (ts, drift) = integrate_heisenberg_with_drift(
                &layout,
                &scenario.params,
                &scenario.initial,
                &scenario.times(),
                &scenario.ode_options(),
            )?;
            log::info!("ode oracle step-halving drift {drift:e}");
            Ok(ts)
        }
        Engine::Perturbative => Ok(perturbative_series(&scenario.perturb_inputs()?, &scenario.times())?),
    }
}

type Observable = (&'static str, fn(&Record) -> f64);

const OBSERVABLES: [Observable; 8] = [
    ("n1", |r| r.shares[0]),
    ("n2", |r| r.shares[1]),
    ("k1", |r| r.cash[0]),
    ("k2", |r| r.cash[1]),
    ("I1", |r| r.info[0]),
    ("I2", |r| r.info[1]),
    ("Pi1", |r| r.portfolio[0]),
    ("Pi2", |r| r.portfolio[1]),
];

/// Max-abs and RMS differences of every shared observable of two series on
/// the same time grid.
pub fn engine_deviations(a: &TimeSeries, b: &TimeSeries) -> Vec<Deviation> {
    assert_eq!(a.times, b.times, "series must share the time grid");
    OBSERVABLES
        .iter()
        .map(|(name, f)| {
            let diffs: Vec<f64> = a.records.iter().zip(&b.records).map(|(x, y)| (f(x) - f(y)).abs()).collect();
            Deviation {
                engines: [a.engine, b.engine],
                observable: name.to_string(),
                max_abs: diffs.iter().copied().fold(0.0, f64::max),
                rms: (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt(),
            }
        })
        .collect()
}

/// Runs the scenario's engines and reports pairwise deviations.
pub fn compare_engines(scenario: &Scenario) -> Result<(Vec<TimeSeries>, ComparisonReport), Error> {
    let series: Vec<TimeSeries> = scenario
        .engines
        .par_iter()
        .map(|&e| run_engine(scenario, e))
        .collect::<Result<_, _>>()?;
    let mut report = ComparisonReport::new(&scenario.name);
    for i in 0..series.len() {
        for j in i + 1..series.len() {
            report.deviations.extend(engine_deviations(&series[i], &series[j]));
        }
    }
    Ok((series, report))
}

/// Conserved charges, the no-information limit and the portfolio
/// commutator identity on the scenario's sector.
pub fn run_conservation_suite(scenario: &Scenario, no_information_lambda: f64) -> Result<ComparisonReport, Error> {
    let mut report = ComparisonReport::new(&scenario.name);
    let params = scenario.model_params();
    let opts = scenario.evolve_options();

    let full = run_exact(scenario, &params, &opts)?;
    let m_drift = [0, 1].map(|j| full.max_drift(|r| r.conserved.expect("exact engine")[j]));
    let max_leakage = full.max_leakage().expect("exact engine");
    let m = m_drift[0].max(m_drift[1]);
    report.check(
        "conservation.m_drift",
        m,
        "<= 1e-8",
        Status::from_bool(m <= 1e-8),
        format!("M1 {:.3e}, M2 {:.3e}", m_drift[0], m_drift[1]),
    );
    report.check(
        "conservation.leakage",
        max_leakage,
        &format!("<= {:e}", opts.leakage_threshold),
        Status::from_bool(max_leakage <= opts.leakage_threshold),
        String::new(),
    );

    let mut quiet = params.without_information();
    quiet.lambda = no_information_lambda;
    let free = run_exact(scenario, &quiet, &opts)?;
    let pi_drift = [0, 1].map(|j| free.max_drift(|r| r.portfolio[j]));
    let s_var = [0, 1].map(|j| free.max_drift(|r| r.shares[j]));
    let k_var = [0, 1].map(|j| free.max_drift(|r| r.cash[j]));
    let p = pi_drift[0].max(pi_drift[1]);
    report.check(
        "no_information.portfolio_drift",
        p,
        "<= 1e-10",
        Status::from_bool(p <= 1e-10),
        format!("λ = {no_information_lambda}"),
    );
    let v = s_var.iter().chain(&k_var).copied().fold(f64::INFINITY, f64::min);
    report.check(
        "no_information.share_cash_variation",
        v,
        "> 1e-3",
        Status::from_bool(v > 1e-3),
        format!("S {:.3e}/{:.3e}, K {:.3e}/{:.3e}", s_var[0], s_var[1], k_var[0], k_var[1]),
    );

    let layout = scenario.layout()?;
    let sector = Sector::of_initial(&layout, &scenario.initial)?;
    let ops = ModelOperators::on_basis(&sector.basis, &params)?;
    let modes = raised_modes(&HamiltonianTerms::new(&layout, &params)?.total());
    let mut residual = [0.0; 2];
    for (j, r) in residual.iter_mut().enumerate() {
        let comm = ops.h.commutator(&ops.pi[j]).expect("same basis");
        let closed = portfolio_commutator_closed_form(&sector.basis, &params, j)?;
        let diff = comm.sub(&closed).expect("same basis");
        *r = interior_projection(&sector.basis, &diff, &modes).max_abs();
    }
    let c = residual[0].max(residual[1]);
    report.check(
        "commutator.portfolio_identity",
        c,
        "<= 1e-12",
        Status::from_bool(c <= 1e-12),
        String::new(),
    );

    report.conservation = Some(ConservationReport {
        m_drift,
        max_leakage,
        portfolio_drift_without_information: pi_drift,
        share_variation_without_information: s_var,
        cash_variation_without_information: k_var,
        commutator_residual: residual,
    });
    Ok(report)
}

/// Least-squares slope and RMS residual of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum::<f64>() / n).sqrt();
    (slope, intercept, rms)
}

fn is_geometric(eps: &[f64]) -> bool {
    let r = eps[1] / eps[0];
    eps.windows(2).all(|w| ((w[1] / w[0]) / r - 1.0).abs() < 1e-9)
}

/// Perturbative formulas against the Heisenberg oracle over a ladder of
/// `λ = λ_inf = ε`.
pub fn run_scaling_study(scenario: &Scenario, epsilons: &[f64]) -> Result<ComparisonReport, Error> {
    if epsilons.len() < 3 || epsilons.iter().any(|e| !(*e > 0.0)) || !is_geometric(epsilons) {
        return Err(Error::Config(
            "scaling study needs at least three positive epsilons in geometric progression".into(),
        ));
    }
    let layout = scenario.layout()?;
    let grid = scenario.times();
    let rows: Vec<ScalingRow> = epsilons
        .par_iter()
        .map(|&eps| -> Result<ScalingRow, Error> {
            let params = scenario.params.with_couplings(eps, eps);
            let window = 10f64.min(1.0 / eps);
            let times: Vec<f64> = grid.iter().copied().filter(|&t| t <= window * (1.0 + 1e-12)).collect();
            let (ode, drift) =
                integrate_heisenberg_with_drift(&layout, &params, &scenario.initial, &times, &scenario.ode_options())?;
            let pert = perturbative_series(&PerturbInputs::new(params, scenario.initial)?, &times)?;
            let dev = engine_deviations(&ode, &pert);
            let max_error = dev
                .iter()
                .filter(|d| matches!(d.observable.as_str(), "n1" | "n2" | "k1" | "k2"))
                .map(|d| d.max_abs)
                .fold(0.0, f64::max);
            let max_delta_pi = (0..2).map(|j| ode.max_drift(|r| r.portfolio[j])).fold(0.0, f64::max);
            Ok(ScalingRow {
                epsilon: eps,
                window,
                max_error,
                max_delta_pi,
                oracle_drift: drift,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    let decreasing = |f: fn(&ScalingRow) -> f64| sorted.windows(2).all(|w| f(&w[1]) < f(&w[0]));
    let error_monotone = decreasing(|r| r.max_error);
    let dpi_monotone = decreasing(|r| r.max_delta_pi);
    let oracle_resolved = rows.iter().all(|r| r.oracle_drift <= 0.01 * r.max_error);
    let lx: Vec<f64> = rows.iter().map(|r| r.epsilon.ln()).collect();
    let (error_slope, _, error_residual) = linear_fit(&lx, &rows.iter().map(|r| r.max_error.ln()).collect::<Vec<_>>());
    let (delta_pi_slope, _, delta_pi_residual) =
        linear_fit(&lx, &rows.iter().map(|r| r.max_delta_pi.ln()).collect::<Vec<_>>());

    let mut report = ComparisonReport::new(&scenario.name);
    let status = if !error_monotone || !oracle_resolved {
        Status::Inconclusive
    } else {
        Status::from_bool((2.5..=3.5).contains(&error_slope))
    };
    report.check(
        "scaling.error_slope",
        error_slope,
        "in [2.5, 3.5]",
        status,
        format!(
            "residual {error_residual:.3e}, monotone {error_monotone}, oracle resolved {oracle_resolved}"
        ),
    );
    let status = if !dpi_monotone {
        Status::Inconclusive
    } else {
        Status::from_bool((delta_pi_slope - 2.0).abs() <= 0.2)
    };
    report.check(
        "scaling.delta_pi_slope",
        delta_pi_slope,
        "2.0 ± 0.2",
        status,
        format!("residual {delta_pi_residual:.3e}"),
    );
    report.scaling = Some(ScalingReport {
        rows,
        error_slope,
        error_residual,
        delta_pi_slope,
        delta_pi_residual,
        error_monotone,
        oracle_resolved,
    });
    Ok(report)
}

/// Exponential decay rate of a population series by log-linear least
/// squares on the samples inside `[0.2, 0.9]` before the first drop below
/// 0.2. A population that never falls below 0.9 is fitted over all samples.
pub fn fit_decay_rate(times: &[f64], values: &[f64]) -> Result<(f64, usize), String> {
    let end = values.iter().position(|&v| v < 0.2).unwrap_or(values.len());
    let (t, v): (Vec<f64>, Vec<f64>) = if values.iter().all(|&v| v >= 0.9) {
        (times.to_vec(), values.to_vec())
    } else {
        times[..end]
            .iter()
            .zip(&values[..end])
            .filter(|(_, &v)| (0.2..=0.9).contains(&v))
            .map(|(t, v)| (*t, *v))
            .unzip()
    };
    if t.len() < 3 {
        return Err(format!("only {} samples in the fit window", t.len()));
    }
    if v.windows(2).any(|w| w[1] > w[0] + 1e-12) {
        return Err("population not monotone inside the fit window".into());
    }
    let logs: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    let (slope, _, _) = linear_fit(&t, &logs);
    Ok((-slope, t.len()))
}

/// Decay of `⟨Î₁⟩` from `I₁ = 1` into discretized reservoirs of growing
/// size at fixed node spacing, with `λ = λ_inf = 0`.
pub fn run_damping_study(params: &ModelParams, spec: &DampingSpec) -> Result<ComparisonReport, Error> {
    if params.omega_r[0] == 0.0 {
        return Err(Error::Precondition("damping study needs Ω₁^(r) ≠ 0".into()));
    }
    let amplitude_rate = std::f64::consts::PI * params.gamma[0].powi(2) / params.omega_r[0];
    let target = 2.0 * amplitude_rate;
    let init = InitialOccupations {
        n: [0, 0],
        k: [0, 0],
        i: [1, 0],
    };
    let n = spec.samples - 1;
    let times: Vec<f64> = (0..=n).map(|k| spec.t_max * k as f64 / n as f64).collect();

    let rows: Vec<DampingRow> = spec
        .grid_sizes
        .par_iter()
        .map(|&nodes| -> Result<DampingRow, Error> {
            let window = nodes as f64 * spec.node_spacing / 2.0;
            let mut p = params.with_couplings(0.0, 0.0);
            p.reservoir_grid = ReservoirGrid::midpoint(window, nodes);
            // Only the one-quantum sector is ever built, so the product
            // dimension is allowed to exceed the usual ceiling.
            let layout = LayoutSpec::new([1; 6], nodes, 1).with_max_dimension(u128::MAX).build()?;
            let sector = Sector::of_initial(&layout, &init)?;
            let ops = ModelOperators::on_basis(&sector.basis, &p)?;
            let psi0 = sector.basis.basis_vector(&layout.occupation_vector(&init.mode_list())?)?;
            let ts = evolve_exact(&ops, &psi0, &times, &EvolveOptions::default())?;
            let pop = ts.column(|r| r.info[0]);
            Ok(match fit_decay_rate(&times, &pop) {
                Ok((rate, points)) => DampingRow {
                    nodes,
                    window,
                    rate: Some(rate),
                    relative_error: Some(if target == 0.0 {
                        rate.abs()
                    } else {
                        ((rate - target) / target).abs()
                    }),
                    fit_points: points,
                    note: String::new(),
                },
                Err(note) => DampingRow {
                    nodes,
                    window,
                    rate: None,
                    relative_error: None,
                    fit_points: 0,
                    note,
                },
            })
        })
        .collect::<Result<_, _>>()?;

    let mut by_size = rows.clone();
    by_size.sort_by_key(|r| r.nodes);
    let errors: Option<Vec<f64>> = by_size.iter().map(|r| r.relative_error).collect();
    let monotone = errors
        .as_ref()
        .map(|e| e.windows(2).all(|w| w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0)))
        .unwrap_or(false);
    let finest = by_size.last().expect("non-empty ladder");

    let mut report = ComparisonReport::new("damping");
    match finest.relative_error {
        Some(e) => report.check(
            "damping.finest_rate",
            finest.rate.unwrap_or(f64::NAN),
            &format!("within 20% of {target:.6}"),
            Status::from_bool(e <= 0.2),
            format!("{} nodes, relative error {e:.4}", finest.nodes),
        ),
        None => report.check(
            "damping.finest_rate",
            f64::NAN,
            &format!("within 20% of {target:.6}"),
            Status::Inconclusive,
            finest.note.clone(),
        ),
    }
    report.check(
        "damping.monotone_improvement",
        if monotone { 1.0 } else { 0.0 },
        "errors strictly decreasing",
        if errors.is_none() {
            Status::Inconclusive
        } else {
            Status::from_bool(monotone)
        },
        format!(
            "relative errors {:?}",
            by_size.iter().map(|r| r.relative_error).collect::<Vec<_>>()
        ),
    );
    report.damping = Some(DampingReport {
        target_rate: target,
        amplitude_rate,
        rows,
        monotone,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let (s, i, r) = linear_fit(&x, &y);
        assert!((s - 3.0).abs() < 1e-14 && (i + 1.0).abs() < 1e-14 && r < 1e-14);
    }

    #[test]
    fn decay_fit() {
        let t: Vec<f64> = (0..100).map(|k| 0.1 * k as f64).collect();
        let v: Vec<f64> = t.iter().map(|t| (-0.7 * t).exp()).collect();
        let (rate, n) = fit_decay_rate(&t, &v).unwrap();
        assert!((rate - 0.7).abs() < 1e-12);
        assert!(n > 3);
        let flat = vec![1.0; 100];
        assert_eq!(fit_decay_rate(&t, &flat).unwrap().0, 0.0);
        let mut bumpy = v.clone();
        bumpy[5] = 0.89;
        bumpy[6] = 0.895;
        assert!(fit_decay_rate(&t, &bumpy).is_err());
    }

    #[test]
    fn geometric_ladders() {
        assert!(is_geometric(&[0.04, 0.02, 0.01]));
        assert!(!is_geometric(&[0.04, 0.02, 0.015]));
    }

    #[test]
    fn damping_without_coupling_has_zero_rate() {
        let params = ModelParams {
            omega_s: [0.5, 0.3],
            omega_c: [0.2, 0.45],
            omega: [0.0, 0.0],
            lambda_inf: 0.0,
            lambda: 0.0,
            gamma: [0.0, 0.0],
            omega_r: [1.0, 1.0],
            reservoir_grid: ReservoirGrid::default(),
        };
        let spec = DampingSpec {
            grid_sizes: vec![4, 8],
            node_spacing: 0.25,
            t_max: 5.0,
            samples: 21,
        };
        let r = run_damping_study(&params, &spec).unwrap();
        for row in &r.damping.unwrap().rows {
            assert_eq!(row.rate, Some(0.0));
        }
    }
}
