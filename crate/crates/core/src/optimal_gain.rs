//! First-order optimization of the gain schedule and the two Riccati
//! references it is checked against.

use crate::covariance::{cost_at, GradientField, ScalarGateaux};
use crate::error::{Error, Result};
use crate::kernels::{GainSchedule, KernelBundle};
use crate::model::{measure_averages, Scenario};
use crate::numerics::{trapezoid_by, TimeGrid};
use crate::real::{lit, Real};
use crate::Formula;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerOptions<T: Real> {
    pub initial_step: T,
    pub shrink: T,
    /// Armijo sufficient-decrease constant.
    pub armijo: T,
    pub max_iter: usize,
    /// Absolute tolerance on the gradient sup-norm; `None` means
    /// `1e-4 * (1 + |J|)` at the current iterate.
    pub grad_tol: Option<T>,
    /// Smallest step tried before the line search gives up.
    pub min_step: T,
    /// Starting gain; zero when absent.
    pub initial_gain: Option<GainSchedule<T>>,
}

impl<T: Real> Default for OptimizerOptions<T> {
    fn default() -> Self {
        Self {
            initial_step: T::one(),
            shrink: lit(0.5),
            armijo: lit(1e-4),
            max_iter: 500,
            grad_tol: None,
            min_step: lit(1e-12),
            initial_gain: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient and descent direction within tolerance, or the gradient
    /// within tolerance once the line search stalls and the last node has
    /// taken its Newton step.
    Converged,
    MaxIterations,
    /// No step down to `min_step` gave sufficient decrease; the report holds
    /// the last accepted iterate.
    LineSearchFailed,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max-iterations",
            Termination::LineSearchFailed => "line-search-failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationReport<T: Real> {
    pub gain: GainSchedule<T>,
    /// `J` at the start and after every accepted step.
    pub costs: Vec<T>,
    /// Gradient sup-norm at every iterate, aligned with `costs`.
    pub grad_norms: Vec<T>,
    /// Final gradient, whose sup-norm is the stationarity residual.
    pub gradient: GradientField<T>,
    pub stationarity: T,
    pub iterations: usize,
    pub termination: Termination,
}

impl<T: Real> OptimizationReport<T> {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn final_cost(&self) -> T {
        *self.costs.last().expect("at least the starting cost")
    }
}

struct Iterate<T: Real> {
    gain: GainSchedule<T>,
    cost: T,
    gradient: GradientField<T>,
    direction: Vec<T>,
}

/// Gradient and descent direction at `gain`.
///
/// The gradient density `g(r) = ∫ᵣᵀ Σ K̄₂(t, r) dt` vanishes at `r = T` for
/// every gain, so the direction divides `g(r)` by `∫ᵣᵀ Σ κ(t, r) dt`, where
/// `κ` is the coefficient of `Γ(r)` in `K̄₂(t, r)`, and uses `K̄₂(T, T) / κ(T, T)`
/// at the last node. With no observation noise `κ` vanishes and `Σ` alone is
/// used. Stationary points are unchanged.
fn evaluate<T: Real>(scenario: &Scenario<T>, gain: GainSchedule<T>) -> Result<Iterate<T>> {
    let bundle = KernelBundle::new(scenario, &gain)?;
    let bars = measure_averages(scenario);
    let gx = ScalarGateaux::new(scenario, &bundle, &bars)?;
    let gradient = gx.gradient(Formula::Corrected);
    let sc = scenario.scalar()?;
    let grid = scenario.grid();
    let last = grid.steps();
    let tiny = T::default_epsilon().sqrt();
    let mut direction: Vec<T> = (0..last)
        .map(|r| {
            let w = trapezoid_by(r, last, grid.dt(), |t| {
                sc.cost_weight[t] * gx.gain_curvature(t, r)
            });
            let plain = trapezoid_by(r, last, grid.dt(), |t| sc.cost_weight[t]);
            gradient.values[r] / if w > tiny * plain { w } else { plain }
        })
        .collect();
    let curvature = gx.gain_curvature(last, last);
    let terminal = gx.terminal_density(Formula::Corrected);
    direction.push(if curvature > tiny {
        terminal / curvature
    } else {
        terminal
    });
    let field = crate::covariance::CovarianceField::compute(scenario, &bundle, &bars)?;
    let cost = crate::covariance::cost_from_field(scenario, &field);
    Ok(Iterate {
        gain,
        cost,
        gradient,
        direction,
    })
}

fn sup<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Backtracking gradient descent on `J` from `options.initial_gain` (zero by
/// default). Scalar scenarios only.
pub fn optimize_gain<T: Real>(
    scenario: &Scenario<T>,
    options: &OptimizerOptions<T>,
) -> Result<OptimizationReport<T>> {
    scenario.scalar()?;
    let grid = *scenario.grid();
    let start = match &options.initial_gain {
        Some(g) => {
            grid.check_same(g.grid())?;
            g.clone()
        }
        None => GainSchedule::zeros(grid, 1, 1),
    };
    if !(options.shrink > T::zero() && options.shrink < T::one())
        || !(options.initial_step > T::zero())
    {
        return Err(Error::InvalidArgument(
            "step must be positive and shrink in (0, 1)".into(),
        ));
    }
    let tol = |cost: T| {
        options
            .grad_tol
            .unwrap_or_else(|| lit::<T>(1e-4) * (T::one() + cost.abs()))
    };
    let mut it = evaluate(scenario, start)?;
    let mut costs = vec![it.cost];
    let mut grad_norms = vec![it.gradient.sup_norm()];
    let mut iterations = 0;
    let termination = loop {
        let tolerance = tol(it.cost);
        if it.gradient.sup_norm() <= tolerance && sup(&it.direction) <= tolerance {
            break Termination::Converged;
        }
        if iterations >= options.max_iter {
            break Termination::MaxIterations;
        }
        let slope = it.gradient.pairing(&it.direction)?;
        let direction = GainSchedule::scalar(grid, it.direction.clone())?;
        let mut step = options.initial_step;
        let accepted = loop {
            if step < options.min_step {
                break None;
            }
            let trial = it.gain.perturbed(&direction, -step)?;
            let cost = cost_at(scenario, &trial)?;
            if cost.is_finite() && cost <= it.cost - options.armijo * step * slope && cost < it.cost
            {
                break Some(trial);
            }
            step *= options.shrink;
        };
        let Some(trial) = accepted else {
            if it.gradient.sup_norm() > tolerance {
                break Termination::LineSearchFailed;
            }
            // Newton step at the last node only.
            let mut values = it.gain.scalar_values()?;
            *values.last_mut().expect("grid has nodes") -=
                *it.direction.last().expect("grid has nodes");
            it = evaluate(scenario, GainSchedule::scalar(grid, values)?)?;
            *costs.last_mut().expect("starting cost") = it.cost;
            *grad_norms.last_mut().expect("starting norm") = it.gradient.sup_norm();
            break if it.gradient.sup_norm() <= tol(it.cost) {
                Termination::Converged
            } else {
                Termination::LineSearchFailed
            };
        };
        it = evaluate(scenario, trial)?;
        iterations += 1;
        costs.push(it.cost);
        grad_norms.push(it.gradient.sup_norm());
    };
    let stationarity = it.gradient.sup_norm();
    Ok(OptimizationReport {
        gain: it.gain,
        costs,
        grad_norms,
        gradient: it.gradient,
        stationarity,
        iterations,
        termination,
    })
}

/// `max_j |∫_{t_j}^T Σ K̄₂(t, t_j) dt|`.
pub fn stationarity_residual<T: Real>(scenario: &Scenario<T>, gain: &GainSchedule<T>) -> Result<T> {
    let bundle = KernelBundle::new(scenario, gain)?;
    let bars = measure_averages(scenario);
    Ok(ScalarGateaux::new(scenario, &bundle, &bars)?
        .gradient(Formula::Corrected)
        .sup_norm())
}

/// Reference solution of a scalar Riccati equation on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution<T: Real> {
    pub grid: TimeGrid<T>,
    /// The Riccati unknown (`S` or `M`).
    pub state: Vec<T>,
    pub gain: Vec<T>,
    /// Error variance implied by the solution.
    pub variance: Vec<T>,
}

impl<T: Real> RiccatiSolution<T> {
    pub fn gain_schedule(&self) -> Result<GainSchedule<T>> {
        GainSchedule::scalar(self.grid, self.gain.clone())
    }
}

const BLOW_UP: f64 = 1e100;

fn rk4<T: Real, const K: usize>(
    grid: &TimeGrid<T>,
    f: impl Fn(T, [T; K]) -> [T; K],
) -> Result<Vec<[T; K]>> {
    let dt = grid.dt();
    let half = dt * lit(0.5);
    let axpy = |y: [T; K], h: T, k: [T; K]| -> [T; K] { std::array::from_fn(|i| y[i] + h * k[i]) };
    let mut y = [T::zero(); K];
    let mut out = Vec::with_capacity(grid.len());
    out.push(y);
    for j in 0..grid.steps() {
        let t = grid.node(j);
        let k1 = f(t, y);
        let k2 = f(t + half, axpy(y, half, k1));
        let k3 = f(t + half, axpy(y, half, k2));
        let k4 = f(t + dt, axpy(y, dt, k3));
        y = std::array::from_fn(|i| {
            y[i] + dt / lit(6.0) * (k1[i] + lit::<T>(2.0) * (k2[i] + k3[i]) + k4[i])
        });
        if y.iter().any(|v| !v.is_finite() || v.abs() > lit(BLOW_UP)) {
            return Err(Error::Riccati(format!(
                "solution blew up at t = {}",
                grid.node(j + 1)
            )));
        }
        out.push(y);
    }
    Ok(out)
}

fn check_nonvanishing<T: Real>(grid: &TimeGrid<T>, name: &str, f: &dyn Fn(T) -> T) -> Result<()> {
    for j in 0..grid.len() {
        for t in [grid.node(j), grid.node(j) + grid.dt() * lit(0.5)] {
            let v = f(t);
            if !v.is_finite() || v.abs() <= T::default_epsilon() {
                return Err(Error::Riccati(format!("{name} vanishes at t = {t}")));
            }
        }
    }
    Ok(())
}

/// Kalman–Bucy reference for a scalar scenario without interaction:
/// `S' = 2AS - (C²/γ₀²) S² + σ₀²`, `S(0) = 0`, gain `C S / γ₀²`.
pub fn riccati_kalman_bucy<T: Real>(
    a: impl Fn(T) -> T,
    c: impl Fn(T) -> T,
    sigma0: impl Fn(T) -> T,
    gamma0: impl Fn(T) -> T,
    grid: &TimeGrid<T>,
) -> Result<RiccatiSolution<T>> {
    check_nonvanishing(grid, "gamma0", &gamma0)?;
    let sol = rk4(grid, |t, [s]| {
        let (c, g2, sg) = (c(t), gamma0(t).powi(2), sigma0(t));
        [lit::<T>(2.0) * a(t) * s - c * c / g2 * s * s + sg * sg]
    })?;
    let state: Vec<T> = sol.iter().map(|v| v[0]).collect();
    let gain = state
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let t = grid.node(j);
            c(t) * s / gamma0(t).powi(2)
        })
        .collect();
    Ok(RiccatiSolution {
        grid: *grid,
        variance: state.clone(),
        state,
        gain,
    })
}

/// Reference for the flow with `σ(u, t) = γ(u, t) = u` under a standard
/// normal initial law: `M' = 1 + 2AM - C²M²`, `M(0) = 0`, gain `C M`. The
/// averaged variance `K̄' = 1 + C²M² + 2(A - C²M) K̄` is co-integrated and
/// returned as `variance`.
pub fn riccati_normal_flow<T: Real>(
    a: impl Fn(T) -> T,
    c: impl Fn(T) -> T,
    grid: &TimeGrid<T>,
) -> Result<RiccatiSolution<T>> {
    check_nonvanishing(grid, "C", &c)?;
    let sol = rk4(grid, |t, [m, k]| {
        let (a, c2) = (a(t), c(t).powi(2));
        let h = a - c2 * m;
        [
            T::one() + lit::<T>(2.0) * a * m - c2 * m * m,
            T::one() + c2 * m * m + lit::<T>(2.0) * h * k,
        ]
    })?;
    let state: Vec<T> = sol.iter().map(|v| v[0]).collect();
    let gain = state
        .iter()
        .enumerate()
        .map(|(j, &m)| c(grid.node(j)) * m)
        .collect();
    Ok(RiccatiSolution {
        grid: *grid,
        state,
        gain,
        variance: sol.iter().map(|v| v[1]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_scenario, InitialMeasure, RawCoefficients};
    use nalgebra::DVector;

    fn classical(raw: RawCoefficients<f64>, steps: usize) -> Scenario<f64> {
        build_scenario(
            &raw,
            InitialMeasure::dirac(DVector::zeros(1)),
            TimeGrid::new(1.0, steps).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kalman_bucy_tanh() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let sol = riccati_kalman_bucy(|_| 0.0, |_| 1.0, |_| 1.0, |_| 1.0, &g).unwrap();
        assert_eq!(sol.state[0], 0.0);
        assert!((sol.state[200] - 1f64.tanh()).abs() < 1e-6);
        for j in 0..=200 {
            assert!((sol.gain[j] - g.node(j).tanh()).abs() < 1e-8);
        }
        let zero = riccati_kalman_bucy(|_| 0.0, |_| 1.0, |_| 0.0, |_| 1.0, &g).unwrap();
        assert!(zero.state.iter().chain(&zero.gain).all(|&v| v == 0.0));
        assert!(riccati_kalman_bucy(|_| 0.0, |_| 1.0, |_| 1.0, |t| t - 0.5, &g).is_err());
        assert!(riccati_kalman_bucy(
            |_| 5.0,
            |_| 0.0,
            |_| 1.0,
            |_| 1.0,
            &TimeGrid::new(100.0, 100).unwrap()
        )
        .is_err());
    }

    #[test]
    fn kalman_bucy_general_coefficients() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let (a, c, s0, g0): (f64, f64, f64, f64) = (-0.4, 1.5, 0.8, 0.6);
        let sol = riccati_kalman_bucy(|_| a, |_| c, |_| s0, |_| g0, &g).unwrap();
        let k = c * c / (g0 * g0);
        let root = (a * a + k * s0 * s0).sqrt();
        let (p, q) = ((a + root) / k, (a - root) / k);
        let exact = |t: f64| {
            let e = (-2.0 * root * t).exp();
            p * q * (1.0 - e) / (q - p * e)
        };
        for j in [50, 200] {
            assert!(
                (sol.state[j] - exact(g.node(j))).abs() < 1e-8,
                "{} {}",
                sol.state[j],
                exact(g.node(j))
            );
        }
    }

    #[test]
    fn normal_flow_tanh_and_variance() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let sol = riccati_normal_flow(|_| 0.0, |_| 1.0, &g).unwrap();
        assert_eq!(sol.state[0], 0.0);
        assert!((sol.state[200] - 1f64.tanh()).abs() < 1e-6);
        let gap = sol
            .state
            .iter()
            .zip(&sol.variance)
            .map(|(m, k)| (m - k).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-6);
        let var = riccati_normal_flow(|t: f64| 0.3 * t, |t: f64| 1.0 + t, &g).unwrap();
        let gap = var
            .state
            .iter()
            .zip(&var.variance)
            .map(|(m, k)| (m - k).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-6);
        assert!(riccati_normal_flow(|_| 0.0, |t| t, &g).is_err());
    }

    #[test]
    fn optimizer_recovers_kalman_gain() {
        let s = classical(RawCoefficients::scalar(), 200);
        let report = optimize_gain(&s, &OptimizerOptions::default()).unwrap();
        assert!(
            report.converged(),
            "{:?} after {}",
            report.termination,
            report.iterations
        );
        let dev = report
            .gain
            .scalar_values()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(j, g)| (g - s.grid().node(j).tanh()).abs())
            .fold(0.0, f64::max);
        assert!(dev < 5e-3, "{dev}");
        assert!(report.stationarity < 1e-3);
        assert!(report.costs.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(report.costs.len(), report.iterations + 1);
    }

    #[test]
    fn optimizer_starting_at_optimum_stops_quickly() {
        let s = classical(RawCoefficients::scalar(), 200);
        let start = GainSchedule::from_fn(*s.grid(), f64::tanh).unwrap();
        let opts = OptimizerOptions {
            initial_gain: Some(start),
            ..Default::default()
        };
        let report = optimize_gain(&s, &opts).unwrap();
        assert!(report.converged());
        assert!(report.iterations <= 2, "{}", report.iterations);
    }

    #[test]
    fn optimizer_without_state_noise_keeps_zero_gain() {
        let s = classical(
            RawCoefficients::scalar().state_noise(|_: &DVector<f64>, _| 0.0),
            50,
        );
        let report = optimize_gain(&s, &OptimizerOptions::default()).unwrap();
        assert!(report.converged());
        assert_eq!(report.iterations, 0);
        assert_eq!(report.final_cost(), 0.0);
        assert!(report
            .gain
            .scalar_values()
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn optimizer_reports_max_iterations() {
        let s = classical(RawCoefficients::scalar(), 50);
        let opts = OptimizerOptions {
            max_iter: 1,
            grad_tol: Some(1e-14),
            ..Default::default()
        };
        let report = optimize_gain(&s, &opts).unwrap();
        assert_eq!(report.termination, Termination::MaxIterations);
        assert_eq!(report.iterations, 1);
    }

    #[test]
    fn stationarity_residual_values() {
        let s = classical(RawCoefficients::scalar(), 200);
        let zero = stationarity_residual(&s, &GainSchedule::zeros(*s.grid(), 1, 1)).unwrap();
        assert!((zero - 0.5).abs() < 1e-12);
        let opt = stationarity_residual(&s, &GainSchedule::from_fn(*s.grid(), f64::tanh).unwrap())
            .unwrap();
        assert!(opt < 1e-3);
    }
}
