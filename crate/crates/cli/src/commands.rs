//! Subcommand implementations. Each one loads the scenario, computes, and
//! writes its CSV tables through [`Output`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context as _, Result};
use mfk_core::covariance::{
    cost_from_field, derivative_consistency, fd_gateaux_oracle, ScalarGateaux,
};
use mfk_core::export::{self, num, Provenance};
use mfk_core::model::measure_averages;
use mfk_core::optimal_gain::{optimize_gain, riccati_kalman_bucy, OptimizerOptions};
use mfk_core::simulation::{
    build_filter, empirical_statistics, simulate_ensemble, SimulationOptions,
};
use mfk_core::validation::{run_suite, SuiteOptions};
use mfk_core::{CovarianceField, Formula, GainSchedule, KernelBundle, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario_file::{GainSpec, ScenarioSpec};

/// Trajectories written to `paths.csv`; statistics use every replication.
pub const MAX_EXPORTED_PATHS: usize = 20;
/// Random directions in `gradcheck`, besides `β ≡ 1`.
pub const RANDOM_DIRECTIONS: usize = 4;
pub const DEFAULT_PATHS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Kernels,
    Covariance,
    Gradcheck,
    Optimize,
    Validate,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    /// Built-in name or file path.
    pub scenario: String,
    pub steps: Option<usize>,
    /// Replications; the subcommand default when absent.
    pub paths: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub eps: f64,
    pub grad_tol: Option<f64>,
    pub max_iter: usize,
    pub force: bool,
    /// Gain expression, `zero` or `optimal`, overriding the scenario file.
    pub gain: Option<String>,
}

/// Error tagged with the stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: anyhow::Error,
    /// Files written before the failure.
    pub partial: Vec<PathBuf>,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {:#}", self.stage, self.source)
    }
}

/// Output directory that refuses to overwrite files unless forced and
/// remembers what it wrote.
#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    force: bool,
    written: Vec<PathBuf>,
}

impl Output {
    pub fn new(dir: &Path, force: bool) -> Self {
        Self {
            dir: dir.to_path_buf(),
            force,
            written: Vec::new(),
        }
    }

    /// Writes every file, after checking that none would be overwritten
    /// without `force`.
    pub fn write_all(&mut self, files: &[(&str, String)]) -> Result<()> {
        if !self.force {
            if let Some(path) = files
                .iter()
                .map(|(n, _)| self.dir.join(n))
                .find(|p| p.exists())
            {
                bail!("{} exists; pass --force to overwrite", path.display());
            }
        }
        fs::create_dir_all(&self.dir)
            .with_context(|| format!("cannot create {}", self.dir.display()))?;
        for (name, contents) in files {
            let path = self.dir.join(name);
            fs::write(&path, contents)
                .with_context(|| format!("cannot write {}", path.display()))?;
            self.written.push(path);
        }
        Ok(())
    }
}

struct Run<'a> {
    config: &'a RunConfig,
    out: Output,
    stage: &'static str,
}

impl Run<'_> {
    fn stage(&mut self, stage: &'static str) {
        self.stage = stage;
    }

    fn fail(self, e: anyhow::Error) -> StageError {
        let partial = self.out.written.clone();
        let mut out = self.out;
        if !partial.is_empty() {
            let mut note = format!(
                "stage {} failed: {e:#}\nwritten before the failure:\n",
                self.stage
            );
            for p in &partial {
                let _ = writeln!(note, "{}", p.display());
            }
            out.force = true;
            let _ = out.write_all(&[("PARTIAL", note)]);
        }
        StageError {
            stage: self.stage,
            source: e,
            partial,
        }
    }
}

/// Runs one subcommand; returns the lines to print on success.
pub fn run(config: &RunConfig) -> std::result::Result<Vec<String>, StageError> {
    let mut run = Run {
        config,
        out: Output::new(&config.out, config.force),
        stage: "setup",
    };
    match dispatch(&mut run) {
        Ok(lines) => Ok(lines),
        Err(e) => Err(run.fail(e)),
    }
}

fn dispatch(run: &mut Run<'_>) -> Result<Vec<String>> {
    let config = run.config;
    if config.command == Command::Validate {
        return validate(run);
    }
    run.stage("load");
    let mut spec = ScenarioSpec::load(&config.scenario)?;
    if let Some(g) = &config.gain {
        spec.override_gain(g)?;
    }
    let scenario = spec.build(config.steps)?;
    run.stage("gain");
    let gain = resolve_gain(&spec, &scenario, config)?;
    let header = format!("scenario {} ({})", spec.name, scenario.fingerprint());
    let lines = match config.command {
        Command::Simulate => simulate(run, &scenario, &gain),
        Command::Kernels => kernels(run, &scenario, &gain),
        Command::Covariance => covariance(run, &scenario, &gain),
        Command::Gradcheck => gradcheck(run, &scenario, &gain),
        Command::Optimize => optimize(run, &spec, &scenario),
        Command::Validate => unreachable!(),
    }?;
    Ok(std::iter::once(header).chain(lines).collect())
}

fn optimizer_options(config: &RunConfig) -> OptimizerOptions<f64> {
    OptimizerOptions {
        max_iter: config.max_iter,
        grad_tol: config.grad_tol,
        ..OptimizerOptions::default()
    }
}

fn resolve_gain(
    spec: &ScenarioSpec,
    scenario: &Scenario<f64>,
    config: &RunConfig,
) -> Result<GainSchedule<f64>> {
    if let Some(g) = spec.expression_gain(scenario.grid())? {
        return Ok(g);
    }
    debug_assert!(matches!(spec.gain, GainSpec::Optimal));
    let report = optimize_gain(scenario, &optimizer_options(config)).context("optimal gain")?;
    Ok(report.gain)
}

fn provenance(scenario: &Scenario<f64>, seed: Option<u64>) -> Provenance {
    Provenance::new(scenario.fingerprint(), seed, scenario.grid())
}

fn simulate(
    run: &mut Run<'_>,
    scenario: &Scenario<f64>,
    gain: &GainSchedule<f64>,
) -> Result<Vec<String>> {
    let config = run.config;
    run.stage("simulate");
    let n_paths = config.paths.unwrap_or(DEFAULT_PATHS);
    ensure!(n_paths > 0, "--paths must be positive");
    let ensemble = simulate_ensemble(
        scenario,
        gain,
        &SimulationOptions::new(n_paths, config.seed),
    )?;
    run.stage("statistics");
    let bundle = KernelBundle::new(scenario, gain)?;
    let field = CovarianceField::compute(scenario, &bundle, &measure_averages(scenario))?;
    let prov = provenance(scenario, Some(config.seed));
    let paths = export::paths_csv(&prov, &ensemble, Some(MAX_EXPORTED_PATHS))?;
    let mut rows = Vec::new();
    if n_paths >= 2 {
        for atom in 0..ensemble.atoms() {
            for node in 0..scenario.grid().len() {
                let st = empirical_statistics(&ensemble, atom, node)?;
                rows.push(vec![
                    atom.to_string(),
                    num(scenario.grid().node(node)),
                    export::cell(st.mean.as_slice()),
                    export::matrix_cell(&st.covariance),
                    export::cell(st.mean_se.as_slice()),
                    export::matrix_cell(&st.covariance_se),
                    export::matrix_cell(field.get(atom, node)),
                ]);
            }
        }
    }
    let stats = export::table_csv(
        &prov,
        &[
            "atom",
            "t",
            "mean",
            "covariance",
            "mean_se",
            "covariance_se",
            "K",
        ],
        &rows,
    )?;
    run.stage("write");
    run.out
        .write_all(&[("paths.csv", paths), ("statistics.csv", stats)])?;
    Ok(vec![format!(
        "simulated {} paths x {} atoms, seed {}; wrote {} trajectories",
        n_paths,
        ensemble.atoms(),
        config.seed,
        n_paths.min(MAX_EXPORTED_PATHS)
    )])
}

fn kernels(
    run: &mut Run<'_>,
    scenario: &Scenario<f64>,
    gain: &GainSchedule<f64>,
) -> Result<Vec<String>> {
    run.stage("kernels");
    let bundle = KernelBundle::new(scenario, gain)?;
    let prov = provenance(scenario, Some(run.config.seed));
    let [phi, psi, f] = export::kernels_csv(&prov, &bundle);
    let psi_res = bundle.psi_ode_residual();
    let f_res = bundle.f_pde_residual();
    let rows = vec![
        vec!["psi_ode".to_string(), num(psi_res)],
        vec!["f_pde".to_string(), num(f_res)],
    ];
    let residuals = export::table_csv(&prov, &["check", "residual"], &rows)?;
    run.stage("write");
    run.out.write_all(&[
        ("phi.csv", phi),
        ("psi.csv", psi),
        ("f.csv", f),
        ("residuals.csv", residuals),
    ])?;
    Ok(vec![format!(
        "psi_ode residual {psi_res:.3e}, f_pde residual {f_res:.3e}"
    )])
}

fn covariance(
    run: &mut Run<'_>,
    scenario: &Scenario<f64>,
    gain: &GainSchedule<f64>,
) -> Result<Vec<String>> {
    run.stage("covariance");
    let bundle = KernelBundle::new(scenario, gain)?;
    let bars = measure_averages(scenario);
    let field = CovarianceField::compute(scenario, &bundle, &bars)?;
    let cost = cost_from_field(scenario, &field);
    run.stage("consistency");
    let prov = provenance(scenario, Some(run.config.seed));
    let mut rows = Vec::new();
    let mut lines = vec![format!("J = {cost:.10e}")];
    for form in [Formula::Corrected, Formula::Published] {
        let r = derivative_consistency(scenario, &bundle, &bars, form)?;
        rows.push(vec![form.to_string(), num(r)]);
        lines.push(format!("K1 consistency ({form}): {r:.3e}"));
    }
    let consistency = export::table_csv(&prov, &["formula", "relative_residual"], &rows)?;
    run.stage("write");
    run.out.write_all(&[
        (
            "covariance.csv",
            export::covariance_csv(&prov, scenario.grid(), &field),
        ),
        ("consistency.csv", consistency),
    ])?;
    Ok(lines)
}

/// `β ≡ 1` followed by seeded random directions `c₀ + c₁ sin(ωt) + c₂ cos(ωt)`.
fn directions(scenario: &Scenario<f64>, seed: u64) -> Result<Vec<(String, GainSchedule<f64>)>> {
    let grid = *scenario.grid();
    let mut out = vec![("one".to_string(), GainSchedule::from_fn(grid, |_| 1.0)?)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..RANDOM_DIRECTIONS {
        let (c0, c1, c2, w): (f64, f64, f64, f64) = (
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(1.0..6.0),
        );
        out.push((
            format!("random{k}"),
            GainSchedule::from_fn(grid, move |t| c0 + c1 * (w * t).sin() + c2 * (w * t).cos())?,
        ));
    }
    Ok(out)
}

fn gradcheck(
    run: &mut Run<'_>,
    scenario: &Scenario<f64>,
    gain: &GainSchedule<f64>,
) -> Result<Vec<String>> {
    let config = run.config;
    run.stage("gradient");
    ensure!(config.eps > 0.0, "--eps must be positive");
    let bundle = KernelBundle::new(scenario, gain)?;
    let bars = measure_averages(scenario);
    let g = ScalarGateaux::new(scenario, &bundle, &bars)
        .context("the gradient is available for scalar scenarios")?
        .gradient(Formula::Corrected);
    run.stage("finite-difference");
    let prov = provenance(scenario, Some(config.seed));
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (id, beta) in directions(scenario, config.seed)? {
        let analytic = g.pairing(&beta.scalar_values()?)?;
        let fd = fd_gateaux_oracle(scenario, gain, &beta, config.eps)?;
        let diff = (analytic - fd).abs();
        lines.push(format!(
            "{id}: integral {analytic:.10e}, fd {fd:.10e}, |diff| {diff:.3e}"
        ));
        rows.push(vec![id, num(analytic), num(fd), num(diff)]);
    }
    let table = export::table_csv(&prov, &["direction", "integral", "fd", "abs_diff"], &rows)?;
    run.stage("write");
    run.out.write_all(&[
        (
            "gradient.csv",
            export::gradient_csv(&prov, scenario.grid(), &g)?,
        ),
        ("gradcheck.csv", table),
    ])?;
    Ok(lines)
}

fn optimize(
    run: &mut Run<'_>,
    spec: &ScenarioSpec,
    scenario: &Scenario<f64>,
) -> Result<Vec<String>> {
    let config = run.config;
    run.stage("optimize");
    let report = optimize_gain(scenario, &optimizer_options(config))?;
    run.stage("reference");
    let grid = scenario.grid();
    let deviation = match spec.kalman_bucy_reference() {
        Some([a, c, s, g]) => {
            let reference = riccati_kalman_bucy(a, c, s, g, grid)?;
            let gain = report.gain.scalar_values()?;
            Some(
                gain.iter()
                    .zip(&reference.gain)
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())),
            )
        }
        None => None,
    };
    let filter = build_filter(scenario, &report.gain)?;
    let prov = provenance(scenario, Some(run.config.seed));
    let filter_rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| {
            vec![
                num(grid.node(i)),
                export::matrix_cell(&filter.h[i]),
                export::matrix_cell(&filter.m[i]),
                export::matrix_cell(report.gain.value(i)),
            ]
        })
        .collect();
    let mut summary = vec![
        vec!["termination".to_string(), report.termination.to_string()],
        vec!["iterations".to_string(), report.iterations.to_string()],
        vec!["J".to_string(), num(report.final_cost())],
        vec!["stationarity".to_string(), num(report.stationarity)],
    ];
    if let Some(d) = deviation {
        summary.push(vec!["max_gain_deviation_kalman_bucy".to_string(), num(d)]);
    }
    run.stage("write");
    run.out.write_all(&[
        ("optimizer.csv", export::optimizer_csv(&prov, &report)),
        ("gain.csv", export::gain_csv(&prov, &report.gain)),
        (
            "gradient.csv",
            export::gradient_csv(&prov, grid, &report.gradient)?,
        ),
        (
            "filter.csv",
            export::table_csv(&prov, &["t", "H", "M", "gain"], &filter_rows)?,
        ),
        (
            "summary.csv",
            export::table_csv(&prov, &["key", "value"], &summary)?,
        ),
    ])?;
    let mut lines = vec![format!(
        "{} after {} iterations: J = {:.10e}, stationarity residual {:.3e}",
        report.termination,
        report.iterations,
        report.final_cost(),
        report.stationarity
    )];
    if let Some(d) = deviation {
        lines.push(format!(
            "max gain deviation from the Kalman-Bucy reference: {d:.3e}"
        ));
    }
    if !report.converged() {
        run.stage("convergence");
        return Err(anyhow!("optimizer stopped with {}", report.termination));
    }
    Ok(lines)
}

fn validate(run: &mut Run<'_>) -> Result<Vec<String>> {
    let config = run.config;
    run.stage("validate");
    let mut opts = SuiteOptions {
        seed: config.seed,
        ..SuiteOptions::default()
    };
    if let Some(p) = config.paths {
        ensure!(p > 0, "--paths must be positive");
        opts.mc_paths = p;
    }
    let report = run_suite(&opts)?;
    let mut lines: Vec<String> = report.criteria.iter().map(ToString::to_string).collect();
    lines.extend(
        report
            .arbitration
            .iter()
            .map(|a| format!("arbitration: {a}")),
    );
    run.stage("write");
    let files: Vec<(&str, String)> = report
        .artifacts
        .iter()
        .map(|(n, c)| (n.as_str(), c.clone()))
        .collect();
    run.out.write_all(&files)?;
    if !report.passed() {
        run.stage("acceptance");
        for l in &lines {
            eprintln!("{l}");
        }
        let failed: Vec<String> = report
            .criteria
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.id.to_string())
            .collect();
        bail!("criteria {} failed", failed.join(", "));
    }
    Ok(lines)
}
