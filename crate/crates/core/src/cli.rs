//! Subcommand bodies behind the `qmarket` binary: scenario in, CSV and
//! JSON out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::harness::{self, ComparisonReport};
use crate::perturb::asymptotic_portfolio_change;
use crate::propagate::{Engine, TimeSeries};
use crate::scenario::{Error, ErrorKind, Scenario};

pub const CSV_HEADER: &str = "t,n1,n2,k1,k2,I1_mean,I2_mean,Pi1,Pi2,M1,M2,leakage";

/// Process exit code for an error category.
pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Precondition => 3,
        ErrorKind::Numerical => 4,
        ErrorKind::Io => 5,
    }
}

/// Exit code when a comparison completes but a criterion does not pass.
pub const EXIT_CRITERIA_FAILED: i32 = 1;

/// Parses a comma-separated engine list such as `exact,perturb`.
pub fn parse_engines(list: &str) -> Result<Vec<Engine>, Error> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "exact" => Ok(Engine::Exact),
            "ode" => Ok(Engine::HeisenbergOde),
            "perturb" => Ok(Engine::Perturbative),
            other => Err(Error::Config(format!("unknown engine {other:?} (expected exact, ode or perturb)"))),
        })
        .collect()
}

/// Loads and validates a scenario, applying an optional engine override.
pub fn load_scenario(path: &Path, engines: Option<&str>) -> Result<Scenario, Error> {
    let mut scenario = Scenario::load(path)?;
    if let Some(list) = engines {
        scenario.engines = parse_engines(list)?;
    }
    scenario.validate()?;
    Ok(scenario)
}

/// 17 significant digits, enough to round-trip any double.
/// Negative zero is printed as zero.
fn num(x: f64) -> String {
    format!("{:.16e}", x + 0.0)
}

pub fn series_csv(ts: &TimeSeries) -> String {
    let mut out = String::with_capacity(256 * (ts.times.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (t, r) in ts.times.iter().zip(&ts.records) {
        let mut row = vec![num(*t)];
        row.extend(r.shares.iter().chain(&r.cash).chain(&r.info).chain(&r.portfolio).map(|v| num(*v)));
        match r.conserved {
            Some(m) => row.extend(m.iter().map(|v| num(*v))),
            None => row.extend([String::new(), String::new()]),
        }
        row.push(r.leakage.map(num).unwrap_or_default());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, Error> {
    fs::write(&path, contents).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

fn ensure_dir(out: &Path) -> Result<(), Error> {
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("creating {}: {e}", out.display())))
}

/// Runs every engine of the scenario and writes `<name>_<engine>.csv`.
pub fn cmd_run(scenario: &Scenario, out: &Path) -> Result<Vec<PathBuf>, Error> {
    let series: Vec<TimeSeries> = scenario
        .engines
        .par_iter()
        .map(|&e| harness::run_engine(scenario, e))
        .collect::<Result<_, _>>()?;
    ensure_dir(out)?;
    series
        .iter()
        .map(|ts| write(out.join(format!("{}_{}.csv", scenario.name, ts.engine.label())), &series_csv(ts)))
        .collect()
}

/// Runs the suites selected under `compare`, plus pairwise engine
/// deviations when more than one engine is listed. Writes
/// `<name>_report.json` and `<name>_summary.txt`.
pub fn cmd_compare(scenario: &Scenario, out: &Path) -> Result<ComparisonReport, Error> {
    let spec = scenario
        .compare
        .as_ref()
        .ok_or_else(|| Error::Config("compare needs a `compare` section".into()))?;
    let mut report = if scenario.engines.len() > 1 {
        harness::compare_engines(scenario)?.1
    } else {
        let mut r = ComparisonReport::default();
        r.scenario = scenario.name.clone();
        r
    };
    if let Some(c) = &spec.conservation {
        report.merge(harness::run_conservation_suite(scenario, c.no_information_lambda)?);
    }
    if let Some(s) = &spec.scaling {
        report.merge(harness::run_scaling_study(scenario, &s.epsilons)?);
    }
    if let Some(d) = &spec.damping {
        report.merge(harness::run_damping_study(&scenario.params, d)?);
    }
    ensure_dir(out)?;
    write(out.join(format!("{}_report.json", scenario.name)), &(report.to_json() + "\n"))?;
    write(out.join(format!("{}_summary.txt", scenario.name)), &report.summary())?;
    Ok(report)
}

/// One cell of an asymptote sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub values: Vec<f64>,
    /// `None` when the asymptote is undefined (no positive decay rate).
    pub delta_pi: Option<[f64; 2]>,
    pub sufficient: bool,
}

/// Trader 1 holds more information, is closer to resonance in both
/// channels, and has the smaller `γ²/|Ω^(r)|`.
pub fn sufficient_conditions(scenario_params: &crate::model::ModelParams, i: [u32; 2]) -> bool {
    let p = scenario_params;
    let ds = |j: usize| (p.omega_s[j] - p.omega[j]).abs();
    let dc = |j: usize| (p.omega_c[j] - p.omega[j]).abs();
    let ratio = |j: usize| p.gamma[j] * p.gamma[j] / p.omega_r[j].abs();
    i[0] > i[1] && ds(0) < ds(1) && dc(0) < dc(1) && ratio(0) < ratio(1)
}

pub fn sweep_cells(scenario: &Scenario) -> Result<Vec<SweepCell>, Error> {
    let sweep = scenario
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("asymptote needs a `sweep` section".into()))?;
    (0..sweep.cells())
        .into_par_iter()
        .map(|idx| {
            let values = sweep.cell(idx);
            let mut params = scenario.params.clone();
            let mut init = scenario.initial;
            for (axis, &v) in sweep.axes.iter().zip(&values) {
                axis.field.apply(&mut params, &mut init, v)?;
            }
            params.validate()?;
            let sufficient = sufficient_conditions(&params, init.i);
            let delta_pi = match asymptotic_portfolio_change(&params, init.i).map_err(Error::from) {
                Ok(v) => Some(v),
                Err(e) if e.kind() == ErrorKind::Precondition => None,
                Err(e) => return Err(e),
            };
            Ok(SweepCell {
                values,
                delta_pi,
                sufficient,
            })
        })
        .collect()
}

pub fn sweep_csv(scenario: &Scenario, cells: &[SweepCell]) -> String {
    let axes = &scenario.sweep.as_ref().expect("sweep present").axes;
    let mut out = String::new();
    for a in axes {
        out.push_str(a.field.label());
        out.push(',');
    }
    out.push_str("dpi1_inf,dpi2_inf,dpi_sum,dpi1_gt_dpi2,sufficient_conditions\n");
    for c in cells {
        for v in &c.values {
            write!(out, "{},", num(*v)).unwrap();
        }
        match c.delta_pi {
            Some([a, b]) => write!(out, "{},{},{},{}", num(a), num(b), num(a + b), a > b).unwrap(),
            None => out.push_str("undefined,undefined,undefined,undefined"),
        }
        writeln!(out, ",{}", c.sufficient).unwrap();
    }
    out
}

/// Evaluates `δΠ_j(∞)` over the sweep grid and writes
/// `<name>_asymptote.csv`, rows ordered by grid index.
pub fn cmd_asymptote(scenario: &Scenario, out: &Path) -> Result<(PathBuf, Vec<SweepCell>), Error> {
    let cells = sweep_cells(scenario)?;
    ensure_dir(out)?;
    let path = write(out.join(format!("{}_asymptote.csv", scenario.name)), &sweep_csv(scenario, &cells))?;
    Ok((path, cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_lists() {
        assert_eq!(
            parse_engines("exact, perturb").unwrap(),
            vec![Engine::Exact, Engine::Perturbative]
        );
        assert_eq!(parse_engines("ode").unwrap(), vec![Engine::HeisenbergOde]);
        assert!(parse_engines("exact,magic").is_err());
    }

    #[test]
    fn number_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }
}
