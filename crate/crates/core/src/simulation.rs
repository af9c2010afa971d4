//! Euler–Maruyama simulation of the interacting state, the observations, the
//! filter and the error, plus Monte Carlo moment estimates.
//!
//! One replication draws a single pair of noise paths `(W, V)` that drives
//! every atom of the initial measure. Replication `r` uses stream `r` of a
//! ChaCha8 generator keyed by the seed, so results do not depend on thread
//! scheduling and noise can be regenerated instead of stored.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{generators, GainSchedule};
use crate::model::{Dims, Scenario};
use crate::numerics::TimeGrid;
use crate::real::{from_usize, lit, Real};

/// Which nodes keep their trajectory values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum RecordNodes {
    #[default]
    All,
    /// Every `k`-th node, plus the last one.
    Every(usize),
    Nodes(Vec<usize>),
}

impl RecordNodes {
    fn resolve(&self, grid_len: usize) -> Result<Vec<usize>> {
        let last = grid_len - 1;
        let mut nodes: Vec<usize> = match self {
            RecordNodes::All => (0..grid_len).collect(),
            RecordNodes::Every(0) => {
                return Err(Error::InvalidArgument(
                    "record stride must be positive".into(),
                ))
            }
            RecordNodes::Every(k) => (0..grid_len).step_by(*k).chain([last]).collect(),
            RecordNodes::Nodes(v) => v.clone(),
        };
        if let Some(&bad) = nodes.iter().find(|&&n| n > last) {
            return Err(Error::InvalidArgument(format!(
                "record node {bad} past the grid"
            )));
        }
        nodes.sort_unstable();
        nodes.dedup();
        Ok(nodes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub n_paths: usize,
    pub seed: u64,
    pub record: RecordNodes,
}

impl SimulationOptions {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            record: RecordNodes::All,
        }
    }

    pub fn record(mut self, record: RecordNodes) -> Self {
        self.record = record;
        self
    }
}

/// Values of `(x, y, z, e)` at one atom and node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint<'a, T> {
    pub x: &'a [T],
    pub y: &'a [T],
    pub z: &'a [T],
    pub e: &'a [T],
}

/// Monte Carlo trajectories at the recorded nodes.
///
/// Per replication the values are stored flat, node-major then atom-major,
/// each slot holding `x (n) | y (m) | z (n) | e (n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble<T: Real> {
    grid: TimeGrid<T>,
    dims: Dims,
    atoms: usize,
    seed: u64,
    recorded: Vec<usize>,
    slot_of: Vec<Option<usize>>,
    data: Vec<Vec<T>>,
    q_chol: DMatrix<T>,
    q0_chol: DMatrix<T>,
}

impl<T: Real> PathEnsemble<T> {
    pub fn n_paths(&self) -> usize {
        self.data.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn recorded_nodes(&self) -> &[usize] {
        &self.recorded
    }

    fn width(&self) -> usize {
        3 * self.dims.state + self.dims.observation
    }

    pub fn point(&self, rep: usize, atom: usize, node: usize) -> Result<PathPoint<'_, T>> {
        if atom >= self.atoms {
            return Err(Error::UnknownAtom(atom));
        }
        let slot = self
            .slot_of
            .get(node)
            .copied()
            .flatten()
            .ok_or(Error::NotRecorded(node))?;
        let rep_data = self.data.get(rep).ok_or_else(|| {
            Error::InvalidArgument(format!("replication {rep} of {}", self.data.len()))
        })?;
        let (n, m, w) = (self.dims.state, self.dims.observation, self.width());
        let base = (slot * self.atoms + atom) * w;
        let v = &rep_data[base..base + w];
        Ok(PathPoint {
            x: &v[..n],
            y: &v[n..n + m],
            z: &v[n + m..2 * n + m],
            e: &v[2 * n + m..],
        })
    }

    /// Error vectors `e_r(u_atom, t_node)` over all replications.
    pub fn errors(&self, atom: usize, node: usize) -> Result<Vec<&[T]>> {
        (0..self.n_paths())
            .map(|r| self.point(r, atom, node).map(|p| p.e))
            .collect()
    }

    /// Noise increments `(ΔW, ΔV)` of replication `rep`, regenerated from the
    /// seed.
    pub fn noise_increments(&self, rep: usize) -> (Vec<DVector<T>>, Vec<DVector<T>>) {
        let mut gen = NoiseStream::new(self.seed, rep, self.dims.noise, self.grid.dt());
        let steps = self.grid.steps();
        let (mut dw, mut dv) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
        let d = self.dims.noise;
        let (mut w, mut v) = (DVector::zeros(d), DVector::zeros(d));
        for _ in 0..steps {
            gen.next(&self.q_chol, &self.q0_chol, &mut w, &mut v);
            dw.push(w.clone());
            dv.push(v.clone());
        }
        (dw, dv)
    }
}

struct NoiseStream<T> {
    rng: ChaCha8Rng,
    xi: DVector<T>,
    eta: DVector<T>,
    sqrt_dt: T,
}

impl<T: Real> NoiseStream<T> {
    fn new(seed: u64, rep: usize, d: usize, dt: T) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64);
        Self {
            rng,
            xi: DVector::zeros(d),
            eta: DVector::zeros(d),
            sqrt_dt: dt.sqrt(),
        }
    }

    fn next(
        &mut self,
        lq: &DMatrix<T>,
        lq0: &DMatrix<T>,
        dw: &mut DVector<T>,
        dv: &mut DVector<T>,
    ) {
        for v in self.xi.iter_mut().chain(self.eta.iter_mut()) {
            let g: f64 = StandardNormal.sample(&mut self.rng);
            *v = lit(g);
        }
        dw.gemv(self.sqrt_dt, lq, &self.xi, T::zero());
        dv.gemv(self.sqrt_dt, lq0, &self.eta, T::zero());
    }
}

/// Filter coefficients `H = A - ΓC`, `M = B - ΓD` and `Γ` at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoefficients<T: Real> {
    pub h: Vec<DMatrix<T>>,
    pub m: Vec<DMatrix<T>>,
    pub gain: GainSchedule<T>,
}

pub fn build_filter<T: Real>(
    scenario: &Scenario<T>,
    gain: &GainSchedule<T>,
) -> Result<FilterCoefficients<T>> {
    scenario.grid().check_same(gain.grid())?;
    let (h, m) = generators(scenario, gain)?;
    Ok(FilterCoefficients {
        h,
        m,
        gain: gain.clone(),
    })
}

/// Simulates `n_paths` replications of `(x, y, z, e)` for every atom.
///
/// Drift is evaluated at the left node, the interaction means are weighted
/// atom sums of the current values, and the filter only sees the observation
/// increment `Δy`. `y(u, 0) = u` when the observation and state dimensions
/// agree and `0` otherwise.
pub fn simulate_ensemble<T: Real>(
    scenario: &Scenario<T>,
    gain: &GainSchedule<T>,
    options: &SimulationOptions,
) -> Result<PathEnsemble<T>> {
    if options.n_paths == 0 {
        return Err(Error::TooFewPaths { needed: 1, got: 0 });
    }
    let filter = build_filter(scenario, gain)?;
    let grid = *scenario.grid();
    let recorded = options.record.resolve(grid.len())?;
    let mut slot_of = vec![None; grid.len()];
    for (k, &n) in recorded.iter().enumerate() {
        slot_of[n] = Some(k);
    }
    let data = (0..options.n_paths)
        .into_par_iter()
        .map(|rep| {
            replicate(
                scenario,
                &filter,
                options.seed,
                rep,
                &slot_of,
                recorded.len(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        grid,
        dims: scenario.dims(),
        atoms: scenario.measure().len(),
        seed: options.seed,
        recorded,
        slot_of,
        data,
        q_chol: scenario.q_chol().clone(),
        q0_chol: scenario.q0_chol().clone(),
    })
}

fn replicate<T: Real>(
    scenario: &Scenario<T>,
    filter: &FilterCoefficients<T>,
    seed: u64,
    rep: usize,
    slot_of: &[Option<usize>],
    n_slots: usize,
) -> Result<Vec<T>> {
    let Dims {
        state: n,
        observation: m,
        noise: d,
    } = scenario.dims();
    let grid = scenario.grid();
    let dt = grid.dt();
    let atoms = scenario.measure().atoms();
    let weights: Vec<T> = atoms.iter().map(|a| a.weight).collect();
    let mut x: Vec<DVector<T>> = atoms.iter().map(|a| a.point.clone()).collect();
    let mut z = x.clone();
    let mut y: Vec<DVector<T>> = atoms
        .iter()
        .map(|a| {
            if m == n {
                a.point.clone()
            } else {
                DVector::zeros(m)
            }
        })
        .collect();
    let width = 3 * n + m;
    let mut out = vec![T::zero(); n_slots * atoms.len() * width];
    let mut noise = NoiseStream::new(seed, rep, d, dt);
    let (mut dw, mut dv) = (DVector::zeros(d), DVector::zeros(d));
    let (mut x_bar, mut z_bar) = (DVector::zeros(n), DVector::zeros(n));
    let (mut dx, mut dz, mut dy) = (DVector::zeros(n), DVector::zeros(n), DVector::zeros(m));

    let record =
        |out: &mut [T], slot: usize, x: &[DVector<T>], y: &[DVector<T>], z: &[DVector<T>]| {
            for k in 0..x.len() {
                let base = (slot * x.len() + k) * width;
                let v = &mut out[base..base + width];
                v[..n].copy_from_slice(x[k].as_slice());
                v[n..n + m].copy_from_slice(y[k].as_slice());
                v[n + m..2 * n + m].copy_from_slice(z[k].as_slice());
                for c in 0..n {
                    v[2 * n + m + c] = x[k][c] - z[k][c];
                }
            }
        };
    if let Some(slot) = slot_of[0] {
        record(&mut out, slot, &x, &y, &z);
    }

    for j in 0..grid.steps() {
        noise.next(scenario.q_chol(), scenario.q0_chol(), &mut dw, &mut dv);
        x_bar.fill(T::zero());
        z_bar.fill(T::zero());
        for k in 0..atoms.len() {
            x_bar.axpy(weights[k], &x[k], T::one());
            z_bar.axpy(weights[k], &z[k], T::one());
        }
        let (a, b, c, dd) = (scenario.a(j), scenario.b(j), scenario.c(j), scenario.d(j));
        let (h, mm, g) = (&filter.h[j], &filter.m[j], filter.gain.value(j));
        for k in 0..atoms.len() {
            dx.gemv(dt, a, &x[k], T::zero());
            dx.gemv(dt, b, &x_bar, T::one());
            dx.gemv(T::one(), scenario.sigma(k, j), &dw, T::one());

            dy.gemv(dt, c, &x[k], T::zero());
            dy.gemv(dt, dd, &x_bar, T::one());
            dy.gemv(T::one(), scenario.gamma(k, j), &dv, T::one());

            dz.gemv(dt, h, &z[k], T::zero());
            dz.gemv(dt, mm, &z_bar, T::one());
            dz.gemv(T::one(), g, &dy, T::one());

            x[k] += &dx;
            y[k] += &dy;
            z[k] += &dz;
            if !(x[k]
                .iter()
                .chain(z[k].iter())
                .chain(y[k].iter())
                .all(|v| v.is_finite()))
            {
                return Err(Error::Diverged { node: j + 1 });
            }
        }
        if let Some(slot) = slot_of[j + 1] {
            record(&mut out, slot, &x, &y, &z);
        }
    }
    Ok(out)
}

/// Sample moments of the error over replications.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStatistics<T: Real> {
    pub n_paths: usize,
    pub mean: DVector<T>,
    /// Unbiased sample covariance.
    pub covariance: DMatrix<T>,
    /// Standard error of each mean component.
    pub mean_se: DVector<T>,
    /// Standard error of each covariance entry from the fourth-moment
    /// estimator `sqrt((m₄ - c²) / M)`.
    pub covariance_se: DMatrix<T>,
}

pub fn empirical_statistics<T: Real>(
    ensemble: &PathEnsemble<T>,
    atom: usize,
    node: usize,
) -> Result<EmpiricalStatistics<T>> {
    let paths = ensemble.n_paths();
    if paths < 2 {
        return Err(Error::TooFewPaths {
            needed: 2,
            got: paths,
        });
    }
    let samples = ensemble.errors(atom, node)?;
    let n = ensemble.dims().state;
    let count: T = from_usize(paths);
    let mut mean = DVector::zeros(n);
    for e in &samples {
        for c in 0..n {
            mean[c] += e[c];
        }
    }
    mean /= count;
    let mut cov = DMatrix::zeros(n, n);
    let mut m4 = DMatrix::zeros(n, n);
    for e in &samples {
        for a in 0..n {
            for b in 0..n {
                let p = (e[a] - mean[a]) * (e[b] - mean[b]);
                cov[(a, b)] += p;
                m4[(a, b)] += p * p;
            }
        }
    }
    let biased = &cov / count;
    let covariance = cov / (count - T::one());
    let m4 = m4 / count;
    let covariance_se = m4.zip_map(&biased, |f, c| ((f - c * c).max(T::zero()) / count).sqrt());
    let mean_se = DVector::from_fn(n, |c, _| (covariance[(c, c)] / count).sqrt());
    Ok(EmpiricalStatistics {
        n_paths: paths,
        mean,
        covariance,
        mean_se,
        covariance_se,
    })
}
