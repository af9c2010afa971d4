//! CSV rendering of computed fields.
//!
//! Every table starts with `#` comment rows carrying the scenario
//! fingerprint, seed, grid and crate version. Floats are written with 17
//! significant digits; a matrix cell is its column-major entries joined by
//! `;`.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::covariance::{CovarianceField, GradientField};
use crate::error::{Error, Result};
use crate::kernels::{GainSchedule, KernelBundle};
use crate::numerics::TimeGrid;
use crate::optimal_gain::OptimizationReport;
use crate::real::Real;
use crate::simulation::PathEnsemble;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const PATHS_HEADER: &str = "rep,atom,t,x,y,z,e";
pub const KERNEL_HEADER: &str = "t,s,value";
pub const COVARIANCE_HEADER: &str = "atom,t,K";
pub const GRADIENT_HEADER: &str = "t,g";
pub const OPTIMIZER_HEADER: &str = "iter,J,grad_norm";

/// Metadata written at the top of every table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub scenario_hash: String,
    pub seed: Option<u64>,
    pub horizon: String,
    pub steps: usize,
}

impl Provenance {
    pub fn new<T: Real>(
        scenario_hash: impl Into<String>,
        seed: Option<u64>,
        grid: &TimeGrid<T>,
    ) -> Self {
        Self {
            scenario_hash: scenario_hash.into(),
            seed,
            horizon: num(grid.horizon()),
            steps: grid.steps(),
        }
    }

    fn header(&self, out: &mut String, columns: &str) {
        let seed = self
            .seed
            .map_or_else(|| "none".to_string(), |s| s.to_string());
        let _ = writeln!(out, "# scenario_hash={}", self.scenario_hash);
        let _ = writeln!(out, "# seed={seed}");
        let _ = writeln!(out, "# grid=[0,{}] steps={}", self.horizon, self.steps);
        let _ = writeln!(out, "# version={VERSION}");
        let _ = writeln!(out, "{columns}");
    }
}

/// `x` with 17 significant digits.
pub fn num<T: Real>(x: T) -> String {
    format!("{x:.16e}")
}

pub fn cell<T: Real>(values: &[T]) -> String {
    values.iter().map(|&v| num(v)).collect::<Vec<_>>().join(";")
}

pub fn matrix_cell<T: Real>(m: &DMatrix<T>) -> String {
    cell(m.as_slice())
}

/// Trajectories of the first `max_reps` replications (all when `None`) at
/// every recorded node.
pub fn paths_csv<T: Real>(
    prov: &Provenance,
    ensemble: &PathEnsemble<T>,
    max_reps: Option<usize>,
) -> Result<String> {
    let mut out = String::new();
    prov.header(&mut out, PATHS_HEADER);
    let reps = max_reps.map_or(ensemble.n_paths(), |m| m.min(ensemble.n_paths()));
    for rep in 0..reps {
        for atom in 0..ensemble.atoms() {
            for &node in ensemble.recorded_nodes() {
                let p = ensemble.point(rep, atom, node)?;
                let t = num(ensemble.grid().node(node));
                let _ = writeln!(
                    out,
                    "{rep},{atom},{t},{},{},{},{}",
                    cell(p.x),
                    cell(p.y),
                    cell(p.z),
                    cell(p.e)
                );
            }
        }
    }
    Ok(out)
}

/// One transition kernel on the lower triangle.
pub fn kernel_csv<T: Real>(
    prov: &Provenance,
    grid: &TimeGrid<T>,
    kernel: impl Fn(usize, usize) -> DMatrix<T>,
) -> String {
    let mut out = String::new();
    prov.header(&mut out, KERNEL_HEADER);
    for i in 0..grid.len() {
        for j in 0..=i {
            let _ = writeln!(
                out,
                "{},{},{}",
                num(grid.node(i)),
                num(grid.node(j)),
                matrix_cell(&kernel(i, j))
            );
        }
    }
    out
}

/// `Φ`, `Ψ` and `F` tables of a bundle.
pub fn kernels_csv<T: Real>(prov: &Provenance, bundle: &KernelBundle<T>) -> [String; 3] {
    let g = bundle.grid();
    [
        kernel_csv(prov, g, |i, j| bundle.phi(i, j)),
        kernel_csv(prov, g, |i, j| bundle.psi(i, j)),
        kernel_csv(prov, g, |i, j| bundle.f(i, j)),
    ]
}

pub fn covariance_csv<T: Real>(
    prov: &Provenance,
    grid: &TimeGrid<T>,
    field: &CovarianceField<T>,
) -> String {
    let mut out = String::new();
    prov.header(&mut out, COVARIANCE_HEADER);
    for (atom, values) in field.values.iter().enumerate() {
        for (i, k) in values.iter().enumerate() {
            let _ = writeln!(out, "{atom},{},{}", num(grid.node(i)), matrix_cell(k));
        }
    }
    out
}

pub fn gradient_csv<T: Real>(
    prov: &Provenance,
    grid: &TimeGrid<T>,
    g: &GradientField<T>,
) -> Result<String> {
    if g.values.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: g.values.len(),
        });
    }
    let mut out = String::new();
    prov.header(&mut out, GRADIENT_HEADER);
    for (i, &v) in g.values.iter().enumerate() {
        let _ = writeln!(out, "{},{}", num(grid.node(i)), num(v));
    }
    Ok(out)
}

pub fn optimizer_csv<T: Real>(prov: &Provenance, report: &OptimizationReport<T>) -> String {
    let mut out = String::new();
    prov.header(&mut out, OPTIMIZER_HEADER);
    for (k, (&j, &g)) in report.costs.iter().zip(&report.grad_norms).enumerate() {
        let _ = writeln!(out, "{k},{},{}", num(j), num(g));
    }
    out
}

/// `t,gain` table of a gain schedule.
pub fn gain_csv<T: Real>(prov: &Provenance, gain: &GainSchedule<T>) -> String {
    let mut out = String::new();
    prov.header(&mut out, "t,gain");
    for (i, v) in gain.values().iter().enumerate() {
        let _ = writeln!(out, "{},{}", num(gain.grid().node(i)), matrix_cell(v));
    }
    out
}

/// Free-form table with the standard comment rows; every row must have as
/// many cells as `columns`.
pub fn table_csv(prov: &Provenance, columns: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut out = String::new();
    prov.header(&mut out, &columns.join(","));
    for row in rows {
        if row.len() != columns.len() {
            return Err(Error::LengthMismatch {
                expected: columns.len(),
                got: row.len(),
            });
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::measure_averages;
    use crate::presets::classical;
    use crate::simulation::{simulate_ensemble, RecordNodes, SimulationOptions};

    fn data_rows(csv: &str) -> Vec<&str> {
        csv.lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .collect()
    }

    #[test]
    fn number_format_has_17_digits() {
        assert_eq!(num(0.1f64), "1.0000000000000001e-1");
        assert_eq!(num(-2.0f64), "-2.0000000000000000e0");
        let back: f64 = num(std::f64::consts::PI).parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
    }

    #[test]
    fn headers_and_provenance() {
        let s = classical::<f64>(4).unwrap();
        let prov = Provenance::new(s.fingerprint(), Some(3), s.grid());
        let b =
            KernelBundle::new(&s, &GainSchedule::from_fn(*s.grid(), f64::tanh).unwrap()).unwrap();
        let [_, psi, _] = kernels_csv(&prov, &b);
        let lines: Vec<&str> = psi.lines().collect();
        assert_eq!(lines[0], format!("# scenario_hash={}", s.fingerprint()));
        assert_eq!(lines[1], "# seed=3");
        assert!(lines[2].starts_with("# grid=[0,"));
        assert_eq!(lines[3], format!("# version={VERSION}"));
        assert_eq!(lines[4], KERNEL_HEADER);
        assert_eq!(data_rows(&psi).len(), 15);
        for row in data_rows(&psi) {
            let f: Vec<&str> = row.split(',').collect();
            if f[0] == f[1] {
                assert_eq!(f[2].parse::<f64>().unwrap(), 1.0);
            }
        }
        let field = CovarianceField::compute(&s, &b, &measure_averages(&s)).unwrap();
        let cov = covariance_csv(&prov, s.grid(), &field);
        assert!(cov.contains(&format!("\n{COVARIANCE_HEADER}\n")));
        assert_eq!(
            data_rows(&cov)[0]
                .split(',')
                .nth(2)
                .unwrap()
                .parse::<f64>()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn paths_are_reproducible() {
        let s = classical::<f64>(10).unwrap();
        let g = GainSchedule::from_fn(*s.grid(), f64::tanh).unwrap();
        let opts = SimulationOptions::new(5, 8).record(RecordNodes::Every(5));
        let prov = Provenance::new(s.fingerprint(), Some(8), s.grid());
        let a = paths_csv(&prov, &simulate_ensemble(&s, &g, &opts).unwrap(), Some(2)).unwrap();
        let b = paths_csv(&prov, &simulate_ensemble(&s, &g, &opts).unwrap(), Some(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.contains(&format!("\n{PATHS_HEADER}\n")));
        assert_eq!(data_rows(&a).len(), 2 * 3);
    }

    #[test]
    fn table_checks_width() {
        let prov = Provenance::new("h", None, &TimeGrid::new(1.0f64, 2).unwrap());
        assert!(table_csv(&prov, &["a", "b"], &[vec!["1".into()]]).is_err());
        let t = table_csv(&prov, &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        assert!(t.ends_with("a,b\n1,2\n"));
        assert!(t.contains("# seed=none"));
    }
}
