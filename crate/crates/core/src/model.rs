//! Coefficients, noise covariances, cost weight and the initial mass
//! distribution of the interacting system.
//!
//! The state `x(u, t)` of the particle started at `u` and its observation
//! `y(u, t)` follow
//!
//! ```text
//! dx = (A x + B x̄) dt + σ(u, t) dW,     x(u, 0) = u
//! dy = (C x + D x̄) dt + γ(u, t) dV,     y(u, 0) = u
//! ```
//!
//! where `x̄` is the `μ₀`-average over starting points and `W`, `V` are
//! independent Brownian motions with covariances `Q t` and `Q₀ t`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::TimeGrid;
use crate::real::{lit, to_f64, Real};

/// Values a coefficient callable may return: a bare scalar (1×1) or a matrix.
pub trait IntoMatrix<T> {
    fn into_matrix(self) -> DMatrix<T>;
}

impl<T: Real> IntoMatrix<T> for T {
    fn into_matrix(self) -> DMatrix<T> {
        DMatrix::from_element(1, 1, self)
    }
}

impl<T: Real> IntoMatrix<T> for DMatrix<T> {
    fn into_matrix(self) -> DMatrix<T> {
        self
    }
}

pub type TimeFn<T> = Arc<dyn Fn(T) -> DMatrix<T> + Send + Sync>;
pub type FieldFn<T> = Arc<dyn Fn(&DVector<T>, T) -> DMatrix<T> + Send + Sync>;

/// State, observation and noise dimensions `(n, m, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub state: usize,
    pub observation: usize,
    pub noise: usize,
}

impl Dims {
    pub const SCALAR: Dims = Dims {
        state: 1,
        observation: 1,
        noise: 1,
    };

    pub fn new(state: usize, observation: usize, noise: usize) -> Self {
        Self {
            state,
            observation,
            noise,
        }
    }

    pub fn is_scalar(&self) -> bool {
        *self == Self::SCALAR
    }
}

/// Unvalidated coefficient set, as callables of time (and of the starting
/// point for the diffusion coefficients).
#[derive(Clone)]
pub struct RawCoefficients<T> {
    pub dims: Dims,
    pub a: TimeFn<T>,
    pub b: TimeFn<T>,
    pub c: TimeFn<T>,
    pub d: TimeFn<T>,
    pub sigma: FieldFn<T>,
    pub gamma: FieldFn<T>,
    pub q: DMatrix<T>,
    pub q0: DMatrix<T>,
    pub cost_weight: TimeFn<T>,
}

impl<T: Real> fmt::Debug for RawCoefficients<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RawCoefficients")
            .field("dims", &self.dims)
            .field("q", &self.q)
            .field("q0", &self.q0)
            .finish_non_exhaustive()
    }
}

fn constant<T: Real>(m: DMatrix<T>) -> TimeFn<T> {
    Arc::new(move |_| m.clone())
}

impl<T: Real> RawCoefficients<T> {
    /// All drift and diffusion coefficients zero, `Q = Q₀ = I`, `Σ = I`.
    pub fn zeros(dims: Dims) -> Self {
        let Dims {
            state: n,
            observation: m,
            noise: d,
        } = dims;
        Self {
            dims,
            a: constant(DMatrix::zeros(n, n)),
            b: constant(DMatrix::zeros(n, n)),
            c: constant(DMatrix::zeros(m, n)),
            d: constant(DMatrix::zeros(m, n)),
            sigma: Arc::new(move |_, _| DMatrix::zeros(n, d)),
            gamma: Arc::new(move |_, _| DMatrix::zeros(m, d)),
            q: DMatrix::identity(d, d),
            q0: DMatrix::identity(d, d),
            cost_weight: constant(DMatrix::identity(n, n)),
        }
    }

    /// Scalar Kalman–Bucy defaults: `A = B = D = 0`, `C = σ = γ = 1`,
    /// `Q = Q₀ = Σ = 1`.
    pub fn scalar() -> Self {
        Self::zeros(Dims::SCALAR)
            .observation(|_| T::one())
            .state_noise(|_, _| T::one())
            .observation_noise(|_, _| T::one())
    }

    /// `A(t)`.
    pub fn drift<M: IntoMatrix<T>>(mut self, f: impl Fn(T) -> M + Send + Sync + 'static) -> Self {
        self.a = Arc::new(move |t| f(t).into_matrix());
        self
    }

    /// `B(t)`, the coefficient of the mean state.
    pub fn interaction<M: IntoMatrix<T>>(
        mut self,
        f: impl Fn(T) -> M + Send + Sync + 'static,
    ) -> Self {
        self.b = Arc::new(move |t| f(t).into_matrix());
        self
    }

    /// `C(t)`.
    pub fn observation<M: IntoMatrix<T>>(
        mut self,
        f: impl Fn(T) -> M + Send + Sync + 'static,
    ) -> Self {
        self.c = Arc::new(move |t| f(t).into_matrix());
        self
    }

    /// `D(t)`, the observation coefficient of the mean state.
    pub fn observation_interaction<M: IntoMatrix<T>>(
        mut self,
        f: impl Fn(T) -> M + Send + Sync + 'static,
    ) -> Self {
        self.d = Arc::new(move |t| f(t).into_matrix());
        self
    }

    /// `σ(u, t)`.
    pub fn state_noise<M: IntoMatrix<T>>(
        mut self,
        f: impl Fn(&DVector<T>, T) -> M + Send + Sync + 'static,
    ) -> Self {
        self.sigma = Arc::new(move |u, t| f(u, t).into_matrix());
        self
    }

    /// `γ(u, t)`.
    pub fn observation_noise<M: IntoMatrix<T>>(
        mut self,
        f: impl Fn(&DVector<T>, T) -> M + Send + Sync + 'static,
    ) -> Self {
        self.gamma = Arc::new(move |u, t| f(u, t).into_matrix());
        self
    }

    pub fn noise_covariances(mut self, q: DMatrix<T>, q0: DMatrix<T>) -> Self {
        self.q = q;
        self.q0 = q0;
        self
    }

    /// `Σ(t)` in the cost `∫∫ Tr(Σ K) dt μ₀(du)`.
    pub fn cost_weight<M: IntoMatrix<T>>(
        mut self,
        f: impl Fn(T) -> M + Send + Sync + 'static,
    ) -> Self {
        self.cost_weight = Arc::new(move |t| f(t).into_matrix());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom<T: Real> {
    pub point: DVector<T>,
    pub weight: T,
}

/// Finite weighted atom set standing in for `μ₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialMeasure<T: Real> {
    atoms: Vec<Atom<T>>,
}

fn weight_tolerance<T: Real>() -> T {
    let eps = T::default_epsilon() * lit(64.0);
    if eps > lit(1e-12) {
        eps
    } else {
        lit(1e-12)
    }
}

impl<T: Real> InitialMeasure<T> {
    /// Weights must be positive and sum to one.
    pub fn new(atoms: Vec<Atom<T>>) -> Result<Self> {
        Self::check_atoms(&atoms)?;
        let total = atoms.iter().fold(T::zero(), |acc, a| acc + a.weight);
        if (total - T::one()).abs() > weight_tolerance() {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { atoms })
    }

    /// Like [`InitialMeasure::new`] but rescales positive weights to sum to one.
    pub fn normalized(mut atoms: Vec<Atom<T>>) -> Result<Self> {
        Self::check_atoms(&atoms)?;
        let total = atoms.iter().fold(T::zero(), |acc, a| acc + a.weight);
        for a in &mut atoms {
            a.weight /= total;
        }
        Self::new(atoms)
    }

    fn check_atoms(atoms: &[Atom<T>]) -> Result<()> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::InvalidMeasure("no atoms".into()))?;
        for (i, a) in atoms.iter().enumerate() {
            if !(a.weight > T::zero()) || !a.weight.is_finite() {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} has weight {}",
                    a.weight
                )));
            }
            if a.point.len() != first.point.len() {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} has inconsistent dimension"
                )));
            }
            if a.point.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidMeasure(format!("atom {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn dirac(point: DVector<T>) -> Self {
        Self {
            atoms: vec![Atom {
                point,
                weight: T::one(),
            }],
        }
    }

    pub fn atoms(&self) -> &[Atom<T>] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].point.len()
    }

    pub fn weights(&self) -> Vec<T> {
        self.atoms.iter().map(|a| a.weight).collect()
    }

    /// `∫ f(u) μ₀(du)`.
    pub fn integrate<F: Fn(&DVector<T>) -> T>(&self, f: F) -> T {
        self.atoms
            .iter()
            .fold(T::zero(), |acc, a| acc + a.weight * f(&a.point))
    }
}

/// Built-in ways to construct `μ₀`.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasureKind {
    Dirac(Vec<f64>),
    Discrete {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    /// Standard normal in `dim` dimensions via a tensor-product Gauss–Hermite rule.
    GaussHermite {
        nodes: usize,
        dim: usize,
    },
}

pub fn standard_measure<T: Real>(kind: &MeasureKind) -> Result<InitialMeasure<T>> {
    let vector = |p: &[f64]| DVector::from_iterator(p.len(), p.iter().map(|&x| lit::<T>(x)));
    match kind {
        MeasureKind::Dirac(point) => {
            if point.is_empty() {
                return Err(Error::InvalidMeasure(
                    "dirac point has no coordinates".into(),
                ));
            }
            Ok(InitialMeasure::dirac(vector(point)))
        }
        MeasureKind::Discrete { points, weights } => {
            if points.len() != weights.len() {
                return Err(Error::InvalidMeasure(format!(
                    "{} points but {} weights",
                    points.len(),
                    weights.len()
                )));
            }
            let atoms = points
                .iter()
                .zip(weights)
                .map(|(p, &w)| Atom {
                    point: vector(p),
                    weight: lit(w),
                })
                .collect();
            InitialMeasure::normalized(atoms)
        }
        MeasureKind::GaussHermite { nodes, dim } => {
            if *nodes == 0 || *dim == 0 {
                return Err(Error::InvalidMeasure(
                    "gauss-hermite needs nodes >= 1 and dim >= 1".into(),
                ));
            }
            let (x, w) = gauss_hermite(*nodes);
            let mut atoms = vec![(Vec::new(), 1.0)];
            for _ in 0..*dim {
                atoms = atoms
                    .into_iter()
                    .flat_map(|(p, pw): (Vec<f64>, f64)| {
                        x.iter().zip(&w).map(move |(&xi, &wi)| {
                            let mut q = p.clone();
                            q.push(xi);
                            (q, pw * wi)
                        })
                    })
                    .collect();
            }
            InitialMeasure::normalized(
                atoms
                    .iter()
                    .map(|(p, w)| Atom {
                        point: vector(p),
                        weight: lit(*w),
                    })
                    .collect(),
            )
        }
    }
}

/// Nodes and weights of the `k`-point Gauss–Hermite rule for the standard
/// normal density (Golub–Welsch on the probabilists' Hermite recurrence).
/// Exact for polynomials of degree `2k - 1`.
pub fn gauss_hermite(k: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(k, k, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize: the rule is symmetric about zero.
    let nodes: Vec<f64> = (0..k)
        .map(|i| 0.5 * (pairs[i].0 - pairs[k - 1 - i].0))
        .collect();
    let weights: Vec<f64> = (0..k)
        .map(|i| 0.5 * (pairs[i].1 + pairs[k - 1 - i].1))
        .collect();
    let total: f64 = weights.iter().sum();
    (nodes, weights.into_iter().map(|w| w / total).collect())
}

/// Node-sampled scalar coefficients, available when `n = m = d = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSamples<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
    /// `sigma[atom][node]`.
    pub sigma: Vec<Vec<T>>,
    pub gamma: Vec<Vec<T>>,
    pub q: T,
    pub q0: T,
    pub cost_weight: Vec<T>,
    pub weights: Vec<T>,
}

/// Validated coefficient set sampled on a grid.
#[derive(Debug, Clone)]
pub struct Scenario<T: Real> {
    dims: Dims,
    grid: TimeGrid<T>,
    a: Vec<DMatrix<T>>,
    b: Vec<DMatrix<T>>,
    c: Vec<DMatrix<T>>,
    d: Vec<DMatrix<T>>,
    sigma: Vec<Vec<DMatrix<T>>>,
    gamma: Vec<Vec<DMatrix<T>>>,
    q: DMatrix<T>,
    q0: DMatrix<T>,
    q_chol: DMatrix<T>,
    q0_chol: DMatrix<T>,
    cost_weight: Vec<DMatrix<T>>,
    measure: InitialMeasure<T>,
    scalar: Option<ScalarSamples<T>>,
}

fn sample_checked<T: Real>(
    name: &str,
    f: &dyn Fn(T) -> DMatrix<T>,
    grid: &TimeGrid<T>,
    shape: (usize, usize),
) -> Result<Vec<DMatrix<T>>> {
    (0..grid.len())
        .map(|i| {
            let v = f(grid.node(i));
            if v.shape() != shape {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {}x{}",
                    v.nrows(),
                    v.ncols(),
                    shape.0,
                    shape.1
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: name.to_string(),
                    node: i,
                });
            }
            Ok(v)
        })
        .collect()
}

fn symmetric_cholesky<T: Real>(name: &str, m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let scale = m.iter().fold(T::one(), |acc, x| acc.max(x.abs()));
    let tol = T::default_epsilon() * lit::<T>(1e3) * scale;
    if !m.is_square() || (m - m.transpose()).iter().any(|x| x.abs() > tol) {
        return Err(Error::NotPositiveDefinite(format!(
            "{name} (not symmetric)"
        )));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(name.to_string()))
}

/// Validates the raw coefficients and samples them on `grid`; diffusion
/// coefficients are sampled at every atom of `measure`.
pub fn build_scenario<T: Real>(
    raw: &RawCoefficients<T>,
    measure: InitialMeasure<T>,
    grid: TimeGrid<T>,
) -> Result<Scenario<T>> {
    let Dims {
        state: n,
        observation: m,
        noise: d,
    } = raw.dims;
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::Dimension("dimensions must be positive".into()));
    }
    if measure.dim() != n {
        return Err(Error::Dimension(format!(
            "measure atoms live in R^{}, state is R^{n}",
            measure.dim()
        )));
    }
    if raw.q.shape() != (d, d) || raw.q0.shape() != (d, d) {
        return Err(Error::Dimension(format!("Q and Q0 must be {d}x{d}")));
    }
    if raw.q.iter().chain(raw.q0.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "Q/Q0".into(),
            node: 0,
        });
    }
    let q_chol = symmetric_cholesky("Q", &raw.q)?;
    let q0_chol = symmetric_cholesky("Q0", &raw.q0)?;

    let a = sample_checked("A", &*raw.a, &grid, (n, n))?;
    let b = sample_checked("B", &*raw.b, &grid, (n, n))?;
    let c = sample_checked("C", &*raw.c, &grid, (m, n))?;
    let dd = sample_checked("D", &*raw.d, &grid, (m, n))?;
    let cost_weight = sample_checked("Sigma", &*raw.cost_weight, &grid, (n, n))?;
    for (i, w) in cost_weight.iter().enumerate() {
        symmetric_cholesky(&format!("Sigma(t_{i})"), w)?;
    }
    let mut sigma = Vec::with_capacity(measure.len());
    let mut gamma = Vec::with_capacity(measure.len());
    for atom in measure.atoms() {
        let u = atom.point.clone();
        let f = |t| (raw.sigma)(&u, t);
        sigma.push(sample_checked("sigma", &f, &grid, (n, d))?);
        let g = |t| (raw.gamma)(&u, t);
        gamma.push(sample_checked("gamma", &g, &grid, (m, d))?);
    }

    let scalar = raw.dims.is_scalar().then(|| {
        let s = |v: &[DMatrix<T>]| v.iter().map(|x| x[(0, 0)]).collect::<Vec<_>>();
        ScalarSamples {
            a: s(&a),
            b: s(&b),
            c: s(&c),
            d: s(&dd),
            sigma: sigma.iter().map(|v| s(v)).collect(),
            gamma: gamma.iter().map(|v| s(v)).collect(),
            q: raw.q[(0, 0)],
            q0: raw.q0[(0, 0)],
            cost_weight: s(&cost_weight),
            weights: measure.weights(),
        }
    });

    Ok(Scenario {
        dims: raw.dims,
        grid,
        a,
        b,
        c,
        d: dd,
        sigma,
        gamma,
        q: raw.q.clone(),
        q0: raw.q0.clone(),
        q_chol,
        q0_chol,
        cost_weight,
        measure,
        scalar,
    })
}

impl<T: Real> Scenario<T> {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn is_scalar(&self) -> bool {
        self.scalar.is_some()
    }

    /// Scalar samples, or [`Error::NotScalar`].
    pub fn scalar(&self) -> Result<&ScalarSamples<T>> {
        self.scalar.as_ref().ok_or(Error::NotScalar)
    }

    pub fn measure(&self) -> &InitialMeasure<T> {
        &self.measure
    }

    pub fn a(&self, i: usize) -> &DMatrix<T> {
        &self.a[i]
    }

    pub fn b(&self, i: usize) -> &DMatrix<T> {
        &self.b[i]
    }

    pub fn c(&self, i: usize) -> &DMatrix<T> {
        &self.c[i]
    }

    pub fn d(&self, i: usize) -> &DMatrix<T> {
        &self.d[i]
    }

    pub fn sigma(&self, atom: usize, i: usize) -> &DMatrix<T> {
        &self.sigma[atom][i]
    }

    pub fn gamma(&self, atom: usize, i: usize) -> &DMatrix<T> {
        &self.gamma[atom][i]
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn q0(&self) -> &DMatrix<T> {
        &self.q0
    }

    /// Lower Cholesky factor of `Q`.
    pub fn q_chol(&self) -> &DMatrix<T> {
        &self.q_chol
    }

    pub fn q0_chol(&self) -> &DMatrix<T> {
        &self.q0_chol
    }

    pub fn cost_weight(&self, i: usize) -> &DMatrix<T> {
        &self.cost_weight[i]
    }

    pub fn check_atom(&self, atom: usize) -> Result<()> {
        if atom < self.measure.len() {
            Ok(())
        } else {
            Err(Error::UnknownAtom(atom))
        }
    }

    /// SHA-256 over the dimensions, grid, every sampled coefficient and the
    /// measure, as hex. Two scenarios with equal fingerprints produce equal
    /// results.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for x in [
            self.dims.state,
            self.dims.observation,
            self.dims.noise,
            self.grid.steps(),
        ] {
            h.update((x as u64).to_le_bytes());
        }
        let mut put = |m: &DMatrix<T>| {
            for &x in m.iter() {
                h.update(to_f64(x).to_bits().to_le_bytes());
            }
        };
        put(&DMatrix::from_element(1, 1, self.grid.horizon()));
        for v in [&self.a, &self.b, &self.c, &self.d, &self.cost_weight] {
            v.iter().for_each(&mut put);
        }
        for per_atom in self.sigma.iter().chain(&self.gamma) {
            per_atom.iter().for_each(&mut put);
        }
        put(&self.q);
        put(&self.q0);
        for atom in self.measure.atoms() {
            put(&DMatrix::from_column_slice(
                atom.point.len(),
                1,
                atom.point.as_slice(),
            ));
            put(&DMatrix::from_element(1, 1, atom.weight));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `μ₀`-averaged diffusion coefficients on the grid. The second moments fold
/// in the noise covariances: `σ²‾ = ∫ σ Q σ'`, `γ²‾ = ∫ γ Q₀ γ'`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarQuantities<T: Real> {
    pub sigma_bar: Vec<DMatrix<T>>,
    pub gamma_bar: Vec<DMatrix<T>>,
    pub sigma_sq: Vec<DMatrix<T>>,
    pub gamma_sq: Vec<DMatrix<T>>,
}

/// Scalar view of [`BarQuantities`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarBars<T> {
    pub sigma_bar: Vec<T>,
    pub gamma_bar: Vec<T>,
    pub sigma_sq: Vec<T>,
    pub gamma_sq: Vec<T>,
}

impl<T: Real> BarQuantities<T> {
    pub fn scalar(&self) -> Result<ScalarBars<T>> {
        if self.sigma_bar.first().map(|m| m.shape()) != Some((1, 1))
            || self.gamma_bar[0].shape() != (1, 1)
        {
            return Err(Error::NotScalar);
        }
        let s = |v: &[DMatrix<T>]| v.iter().map(|x| x[(0, 0)]).collect();
        Ok(ScalarBars {
            sigma_bar: s(&self.sigma_bar),
            gamma_bar: s(&self.gamma_bar),
            sigma_sq: s(&self.sigma_sq),
            gamma_sq: s(&self.gamma_sq),
        })
    }
}

pub fn measure_averages<T: Real>(scenario: &Scenario<T>) -> BarQuantities<T> {
    let Dims {
        state: n,
        observation: m,
        noise: d,
    } = scenario.dims;
    let len = scenario.grid.len();
    let atoms = scenario.measure.atoms();
    let mut out = BarQuantities {
        sigma_bar: vec![DMatrix::zeros(n, d); len],
        gamma_bar: vec![DMatrix::zeros(m, d); len],
        sigma_sq: vec![DMatrix::zeros(n, n); len],
        gamma_sq: vec![DMatrix::zeros(m, m); len],
    };
    for i in 0..len {
        for (k, atom) in atoms.iter().enumerate() {
            let w = atom.weight;
            let s = &scenario.sigma[k][i];
            let g = &scenario.gamma[k][i];
            out.sigma_bar[i] += s * w;
            out.gamma_bar[i] += g * w;
            out.sigma_sq[i] += s * &scenario.q * s.transpose() * w;
            out.gamma_sq[i] += g * &scenario.q0 * g.transpose() * w;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn grid() -> TimeGrid<f64> {
        TimeGrid::new(1.0, 20).unwrap()
    }

    #[test]
    fn classical_scenario_is_scalar() {
        let s = build_scenario(
            &RawCoefficients::scalar(),
            InitialMeasure::dirac(DVector::from_element(1, 0.0)),
            grid(),
        )
        .unwrap();
        assert!(s.is_scalar());
        let sc = s.scalar().unwrap();
        assert_eq!(sc.c[3], 1.0);
        assert_eq!(sc.a[3], 0.0);
    }

    #[test]
    fn indefinite_noise_covariance_rejected() {
        let raw = RawCoefficients::zeros(Dims::new(1, 1, 2))
            .noise_covariances(dmatrix![1.0, 2.0; 2.0, 1.0], DMatrix::identity(2, 2));
        let err = build_scenario(&raw, InitialMeasure::dirac(DVector::zeros(1)), grid());
        assert!(matches!(err, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let raw =
            RawCoefficients::zeros(Dims::new(2, 1, 1)).observation(|_| DMatrix::<f64>::zeros(1, 3));
        let err = build_scenario(&raw, InitialMeasure::dirac(DVector::zeros(2)), grid());
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_coefficient_rejected() {
        let raw = RawCoefficients::scalar().drift(|t: f64| if t > 0.5 { f64::NAN } else { 0.0 });
        let err = build_scenario(&raw, InitialMeasure::dirac(DVector::zeros(1)), grid());
        assert!(matches!(err, Err(Error::NonFinite { node: 11, .. })));
    }

    #[test]
    fn non_positive_cost_weight_rejected() {
        let raw = RawCoefficients::scalar().cost_weight(|t: f64| 0.5 - t);
        let err = build_scenario(&raw, InitialMeasure::dirac(DVector::zeros(1)), grid());
        assert!(matches!(err, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn measure_dimension_must_match_state() {
        let err = build_scenario(
            &RawCoefficients::<f64>::scalar(),
            InitialMeasure::dirac(DVector::zeros(2)),
            grid(),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn gauss_hermite_moments() {
        let m: InitialMeasure<f64> =
            standard_measure(&MeasureKind::GaussHermite { nodes: 5, dim: 1 }).unwrap();
        assert!((m.integrate(|u| u[0] * u[0]) - 1.0).abs() < 1e-12);
        assert!((m.integrate(|u| u[0].powi(4)) - 3.0).abs() < 1e-12);
        assert!(m.integrate(|u| u[0].powi(3)).abs() < 1e-12);
        let m11: InitialMeasure<f64> =
            standard_measure(&MeasureKind::GaussHermite { nodes: 11, dim: 1 }).unwrap();
        // degree 20 moment: 19!! = 654729075
        assert!((m11.integrate(|u| u[0].powi(20)) / 654_729_075.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gauss_hermite_weights_sum_to_one() {
        for k in 1..=30 {
            let (x, w) = gauss_hermite(k);
            assert_eq!(x.len(), k);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-13);
            assert!(w.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn gauss_hermite_two_dimensional() {
        let m: InitialMeasure<f64> =
            standard_measure(&MeasureKind::GaussHermite { nodes: 3, dim: 2 }).unwrap();
        assert_eq!(m.len(), 9);
        assert!((m.integrate(|u| u[0] * u[0] * u[1] * u[1]) - 1.0).abs() < 1e-12);
        assert!(m.integrate(|u| u[0] * u[1]).abs() < 1e-12);
    }

    #[test]
    fn dirac_and_discrete() {
        let m: InitialMeasure<f64> = standard_measure(&MeasureKind::Dirac(vec![2.0])).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.atoms()[0].point[0], 2.0);
        assert_eq!(m.atoms()[0].weight, 1.0);

        let err = standard_measure::<f64>(&MeasureKind::Discrete {
            points: vec![vec![0.0], vec![1.0]],
            weights: vec![1.0, 0.0],
        });
        assert!(err.is_err());
        let err = InitialMeasure::<f64>::new(vec![Atom {
            point: DVector::zeros(1),
            weight: 0.5,
        }]);
        assert!(err.is_err());
    }

    #[test]
    fn averages_two_point_measure() {
        let measure = standard_measure(&MeasureKind::Discrete {
            points: vec![vec![-1.0], vec![1.0]],
            weights: vec![0.5, 0.5],
        })
        .unwrap();
        let raw = RawCoefficients::scalar().state_noise(|u: &DVector<f64>, _| u[0]);
        let s = build_scenario(&raw, measure, grid()).unwrap();
        let bars = measure_averages(&s).scalar().unwrap();
        assert!(bars.sigma_bar.iter().all(|x| x.abs() < 1e-15));
        assert!(bars.sigma_sq.iter().all(|x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn averages_normal_flow() {
        let measure = standard_measure(&MeasureKind::GaussHermite { nodes: 11, dim: 1 }).unwrap();
        let raw = RawCoefficients::scalar()
            .state_noise(|u: &DVector<f64>, _| u[0])
            .observation_noise(|u: &DVector<f64>, _| u[0]);
        let s = build_scenario(&raw, measure, grid()).unwrap();
        let bars = measure_averages(&s).scalar().unwrap();
        for i in 0..s.grid().len() {
            assert!(bars.sigma_bar[i].abs() < 1e-14 && bars.gamma_bar[i].abs() < 1e-14);
            assert!((bars.sigma_sq[i] - 1.0).abs() < 1e-12);
            assert!((bars.gamma_sq[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dirac_average_is_the_value() {
        let raw = RawCoefficients::scalar().state_noise(|_: &DVector<f64>, t: f64| 1.0 + t * t);
        let s = build_scenario(
            &raw,
            InitialMeasure::dirac(DVector::from_element(1, 3.0)),
            grid(),
        )
        .unwrap();
        let bars = measure_averages(&s).scalar().unwrap();
        for i in 0..s.grid().len() {
            let t = s.grid().node(i);
            assert_eq!(bars.sigma_bar[i], 1.0 + t * t);
        }
    }

    #[test]
    fn averages_scale_with_sigma() {
        let measure: InitialMeasure<f64> =
            standard_measure(&MeasureKind::GaussHermite { nodes: 4, dim: 1 }).unwrap();
        let base = RawCoefficients::scalar().state_noise(|u: &DVector<f64>, t| 0.3 + u[0] * t);
        let doubled =
            RawCoefficients::scalar().state_noise(|u: &DVector<f64>, t| 2.0 * (0.3 + u[0] * t));
        let b1 = measure_averages(&build_scenario(&base, measure.clone(), grid()).unwrap());
        let b2 = measure_averages(&build_scenario(&doubled, measure, grid()).unwrap());
        for i in 0..grid().len() {
            assert!((b2.sigma_bar[i][(0, 0)] - 2.0 * b1.sigma_bar[i][(0, 0)]).abs() < 1e-14);
            assert!((b2.sigma_sq[i][(0, 0)] - 4.0 * b1.sigma_sq[i][(0, 0)]).abs() < 1e-13);
        }
    }

    #[test]
    fn matrix_averages_are_psd() {
        let measure: InitialMeasure<f64> =
            standard_measure(&MeasureKind::GaussHermite { nodes: 3, dim: 2 }).unwrap();
        let raw = RawCoefficients::zeros(Dims::new(2, 1, 2))
            .state_noise(|u: &DVector<f64>, t| dmatrix![u[0], 0.2; t, u[1]])
            .noise_covariances(dmatrix![2.0, 0.5; 0.5, 1.0], DMatrix::identity(2, 2));
        let s = build_scenario(&raw, measure, grid()).unwrap();
        let bars = measure_averages(&s);
        for m in &bars.sigma_sq {
            assert!((m - m.transpose()).norm() < 1e-14);
            assert!(m.symmetric_eigenvalues().iter().all(|&e| e >= -1e-14));
        }
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let mk = |c: f64| {
            build_scenario(
                &RawCoefficients::scalar().observation(move |_| c),
                InitialMeasure::dirac(DVector::zeros(1)),
                grid(),
            )
            .unwrap()
        };
        assert_eq!(mk(1.0).fingerprint(), mk(1.0).fingerprint());
        assert_ne!(mk(1.0).fingerprint(), mk(1.5).fingerprint());
        assert_eq!(mk(1.0).fingerprint().len(), 64);
    }
}
