//! Two-time transition operators of the error dynamics and their
//! directional derivatives with respect to the gain.
//!
//! For a gain `Γ` the filter generators are `H = A - ΓC` and `M = B - ΓD`.
//! `Φ` is generated by `H + M`, `Ψ` by `H`, and
//! `F(t, s) = ∫ₛᵗ Ψ(t, θ) M(θ) Φ(θ, s) dθ`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{IntoMatrix, Scenario};
use crate::numerics::{cumulative_trapezoid, trapezoid_by, TimeGrid, TriangularKernel};
use crate::real::{lit, Real};
use crate::Formula;

/// Gain `Γ(t)` sampled at grid nodes, piecewise linear in between.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule<T: Real> {
    grid: TimeGrid<T>,
    values: Vec<DMatrix<T>>,
}

impl<T: Real> GainSchedule<T> {
    pub fn new(grid: TimeGrid<T>, values: Vec<DMatrix<T>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        let shape = values[0].shape();
        for (i, v) in values.iter().enumerate() {
            if v.shape() != shape {
                return Err(Error::Dimension(format!("gain at node {i} changes shape")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gain".into(),
                    node: i,
                });
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid<T>, rows: usize, cols: usize) -> Self {
        Self {
            values: vec![DMatrix::zeros(rows, cols); grid.len()],
            grid,
        }
    }

    pub fn from_fn<M: IntoMatrix<T>>(grid: TimeGrid<T>, f: impl Fn(T) -> M) -> Result<Self> {
        let values = (0..grid.len())
            .map(|i| f(grid.node(i)).into_matrix())
            .collect();
        Self::new(grid, values)
    }

    pub fn scalar(grid: TimeGrid<T>, values: Vec<T>) -> Result<Self> {
        Self::new(
            grid,
            values
                .into_iter()
                .map(|v| DMatrix::from_element(1, 1, v))
                .collect(),
        )
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[DMatrix<T>] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &DMatrix<T> {
        &self.values[i]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn scalar_values(&self) -> Result<Vec<T>> {
        if self.shape() != (1, 1) {
            return Err(Error::NotScalar);
        }
        Ok(self.values.iter().map(|v| v[(0, 0)]).collect())
    }

    /// `self + eps * direction`.
    pub fn perturbed(&self, direction: &GainSchedule<T>, eps: T) -> Result<Self> {
        self.grid.check_same(&direction.grid)?;
        if self.shape() != direction.shape() {
            return Err(Error::Dimension("gain and direction shapes differ".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&direction.values)
            .map(|(g, b)| g + b * eps)
            .collect();
        Self::new(self.grid, values)
    }

    /// Value at an arbitrary time in `[0, T]` by linear interpolation.
    pub fn at_time(&self, t: T) -> DMatrix<T> {
        let dt = self.grid.dt();
        let pos = (t / dt).max(T::zero());
        let i = pos
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(self.grid.steps() - 1);
        let frac = (pos - crate::real::from_usize::<T>(i)).min(T::one());
        &self.values[i] * (T::one() - frac) + &self.values[i + 1] * frac
    }

    fn check_against(&self, scenario: &Scenario<T>) -> Result<()> {
        self.grid.check_same(scenario.grid())?;
        let dims = scenario.dims();
        if self.shape() != (dims.state, dims.observation) {
            return Err(Error::Dimension(format!(
                "gain is {:?}, expected {}x{}",
                self.shape(),
                dims.state,
                dims.observation
            )));
        }
        Ok(())
    }
}

/// `H = A - ΓC` and `M = B - ΓD` at every node.
pub fn generators<T: Real>(
    scenario: &Scenario<T>,
    gain: &GainSchedule<T>,
) -> Result<(Vec<DMatrix<T>>, Vec<DMatrix<T>>)> {
    gain.check_against(scenario)?;
    let len = scenario.grid().len();
    let h = (0..len)
        .map(|i| scenario.a(i) - gain.value(i) * scenario.c(i))
        .collect();
    let m = (0..len)
        .map(|i| scenario.b(i) - gain.value(i) * scenario.d(i))
        .collect();
    Ok((h, m))
}

/// Scalar transition kernel `exp(∫ₛᵗ g)` with the exponent by cumulative
/// trapezoid, so the semigroup property holds to rounding.
pub fn scalar_transition<T: Real>(generator: &[T], dt: T) -> TriangularKernel<T> {
    let integral = cumulative_trapezoid(generator, dt);
    TriangularKernel::from_fn(generator.len(), |i, j| (integral[i] - integral[j]).exp())
}

/// Matrix transition kernel by classical RK4 on `∂ₜX(t, s) = G(t) X(t, s)`,
/// one column `s` at a time. The generator is linear between nodes.
pub fn rk4_transition<T: Real>(generator: &[DMatrix<T>], dt: T) -> TriangularKernel<DMatrix<T>> {
    use rayon::prelude::*;
    let len = generator.len();
    let n = generator[0].nrows();
    let half = lit::<T>(0.5);
    let columns: Vec<Vec<DMatrix<T>>> = (0..len)
        .into_par_iter()
        .map(|j| {
            let mut col = Vec::with_capacity(len - j);
            let mut x = DMatrix::<T>::identity(n, n);
            col.push(x.clone());
            for i in j..len - 1 {
                let g0 = &generator[i];
                let g1 = &generator[i + 1];
                let gm = (g0 + g1) * half;
                let k1 = g0 * &x;
                let k2 = &gm * (&x + &k1 * (dt * half));
                let k3 = &gm * (&x + &k2 * (dt * half));
                let k4 = g1 * (&x + &k3 * dt);
                x += (k1 + (k2 + k3) * lit::<T>(2.0) + k4) * (dt / lit::<T>(6.0));
                col.push(x.clone());
            }
            col
        })
        .collect();
    TriangularKernel::from_fn(len, |i, j| columns[j][i - j].clone())
}

fn transition<T: Real>(
    scenario: &Scenario<T>,
    generator: Vec<DMatrix<T>>,
) -> TriangularKernel<DMatrix<T>> {
    let dt = scenario.grid().dt();
    if scenario.is_scalar() {
        let g: Vec<T> = generator.iter().map(|m| m[(0, 0)]).collect();
        scalar_transition(&g, dt).map(|&v| DMatrix::from_element(1, 1, v))
    } else {
        rk4_transition(&generator, dt)
    }
}

/// `Φ(t_i, t_j)`, generated by `H + M`.
pub fn compute_phi<T: Real>(
    scenario: &Scenario<T>,
    gain: &GainSchedule<T>,
) -> Result<TriangularKernel<DMatrix<T>>> {
    let (h, m) = generators(scenario, gain)?;
    Ok(transition(
        scenario,
        h.iter().zip(&m).map(|(h, m)| h + m).collect(),
    ))
}

/// `Ψ(t_i, t_j)`, generated by `H`.
pub fn compute_psi<T: Real>(
    scenario: &Scenario<T>,
    gain: &GainSchedule<T>,
) -> Result<TriangularKernel<DMatrix<T>>> {
    let (h, _) = generators(scenario, gain)?;
    Ok(transition(scenario, h))
}

/// `F(t_i, t_j)` by trapezoid over the intermediate nodes.
pub fn compute_f<T: Real>(
    psi: &TriangularKernel<DMatrix<T>>,
    phi: &TriangularKernel<DMatrix<T>>,
    m: &[DMatrix<T>],
    grid: &TimeGrid<T>,
) -> Result<TriangularKernel<DMatrix<T>>> {
    check_kernel_grid(psi.nodes(), grid)?;
    check_kernel_grid(phi.nodes(), grid)?;
    if m.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "M has {} nodes, grid {}",
            m.len(),
            grid.len()
        )));
    }
    let dt = grid.dt();
    let n = m[0].nrows();
    Ok(TriangularKernel::par_from_fn(grid.len(), |i, j| {
        let mut acc = DMatrix::<T>::zeros(n, n);
        for k in j..=i {
            let w = if k == j || k == i {
                lit::<T>(0.5)
            } else {
                T::one()
            };
            acc += psi.get(i, k) * &m[k] * phi.get(k, j) * w;
        }
        if i == j {
            acc.fill(T::zero());
        }
        acc * dt
    }))
}

fn scalar_f<T: Real>(
    psi: &TriangularKernel<T>,
    phi: &TriangularKernel<T>,
    m: &[T],
    dt: T,
) -> TriangularKernel<T> {
    TriangularKernel::par_from_fn(m.len(), |i, j| {
        trapezoid_by(j, i, dt, |k| psi.at(i, k) * m[k] * phi.at(k, j))
    })
}

fn check_kernel_grid<T: Real>(nodes: usize, grid: &TimeGrid<T>) -> Result<()> {
    if nodes != grid.len() {
        return Err(Error::GridMismatch(format!(
            "kernel has {nodes} nodes, grid {}",
            grid.len()
        )));
    }
    Ok(())
}

/// Scalar kernels, stored as plain numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarKernels<T> {
    pub gain: Vec<T>,
    pub h: Vec<T>,
    pub m: Vec<T>,
    pub phi: TriangularKernel<T>,
    pub psi: TriangularKernel<T>,
    pub f: TriangularKernel<T>,
}

#[derive(Debug, Clone, PartialEq)]
enum Storage<T: Real> {
    Scalar(ScalarKernels<T>),
    Matrix {
        phi: TriangularKernel<DMatrix<T>>,
        psi: TriangularKernel<DMatrix<T>>,
        f: TriangularKernel<DMatrix<T>>,
    },
}

/// `H`, `M`, `Φ`, `Ψ` and `F` at one gain.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBundle<T: Real> {
    grid: TimeGrid<T>,
    gain: GainSchedule<T>,
    h: Vec<DMatrix<T>>,
    m: Vec<DMatrix<T>>,
    storage: Storage<T>,
}

impl<T: Real> KernelBundle<T> {
    pub fn new(scenario: &Scenario<T>, gain: &GainSchedule<T>) -> Result<Self> {
        let (h, m) = generators(scenario, gain)?;
        let grid = *scenario.grid();
        let dt = grid.dt();
        let storage = if scenario.is_scalar() {
            let hs: Vec<T> = h.iter().map(|x| x[(0, 0)]).collect();
            let ms: Vec<T> = m.iter().map(|x| x[(0, 0)]).collect();
            let sum: Vec<T> = hs.iter().zip(&ms).map(|(a, b)| *a + *b).collect();
            let phi = scalar_transition(&sum, dt);
            let psi = scalar_transition(&hs, dt);
            let f = scalar_f(&psi, &phi, &ms, dt);
            Storage::Scalar(ScalarKernels {
                gain: gain.scalar_values()?,
                h: hs,
                m: ms,
                phi,
                psi,
                f,
            })
        } else {
            let sum: Vec<DMatrix<T>> = h.iter().zip(&m).map(|(a, b)| a + b).collect();
            let phi = rk4_transition(&sum, dt);
            let psi = rk4_transition(&h, dt);
            let f = compute_f(&psi, &phi, &m, &grid)?;
            Storage::Matrix { phi, psi, f }
        };
        Ok(Self {
            grid,
            gain: gain.clone(),
            h,
            m,
            storage,
        })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn gain(&self) -> &GainSchedule<T> {
        &self.gain
    }

    pub fn h(&self, i: usize) -> &DMatrix<T> {
        &self.h[i]
    }

    pub fn m(&self, i: usize) -> &DMatrix<T> {
        &self.m[i]
    }

    pub fn scalar(&self) -> Result<&ScalarKernels<T>> {
        match &self.storage {
            Storage::Scalar(s) => Ok(s),
            Storage::Matrix { .. } => Err(Error::NotScalar),
        }
    }

    pub fn phi(&self, i: usize, j: usize) -> DMatrix<T> {
        match &self.storage {
            Storage::Scalar(s) => DMatrix::from_element(1, 1, s.phi.at(i, j)),
            Storage::Matrix { phi, .. } => phi.get(i, j).clone(),
        }
    }

    pub fn psi(&self, i: usize, j: usize) -> DMatrix<T> {
        match &self.storage {
            Storage::Scalar(s) => DMatrix::from_element(1, 1, s.psi.at(i, j)),
            Storage::Matrix { psi, .. } => psi.get(i, j).clone(),
        }
    }

    pub fn f(&self, i: usize, j: usize) -> DMatrix<T> {
        match &self.storage {
            Storage::Scalar(s) => DMatrix::from_element(1, 1, s.f.at(i, j)),
            Storage::Matrix { f, .. } => f.get(i, j).clone(),
        }
    }

    /// The three kernels as matrix-valued triangles.
    pub fn kernels(&self) -> [TriangularKernel<DMatrix<T>>; 3] {
        let n = self.grid.len();
        [
            TriangularKernel::from_fn(n, |i, j| self.phi(i, j)),
            TriangularKernel::from_fn(n, |i, j| self.psi(i, j)),
            TriangularKernel::from_fn(n, |i, j| self.f(i, j)),
        ]
    }

    /// Sup over interior `s < t < T` of the central-difference residual of
    /// `∂ₜΨ = H Ψ`.
    pub fn psi_ode_residual(&self) -> T {
        self.residual(|b, i, j| b.h(i) * b.psi(i, j), |b, i, j| b.psi(i, j))
    }

    /// Sup over interior `s < t < T` of the central-difference residual of
    /// `∂ₜF = M Φ + H F`.
    pub fn f_pde_residual(&self) -> T {
        self.residual(
            |b, i, j| b.m(i) * b.phi(i, j) + b.h(i) * b.f(i, j),
            |b, i, j| b.f(i, j),
        )
    }

    fn residual(
        &self,
        rhs: impl Fn(&Self, usize, usize) -> DMatrix<T>,
        field: impl Fn(&Self, usize, usize) -> DMatrix<T>,
    ) -> T {
        let two_dt = self.grid.dt() * lit(2.0);
        let last = self.grid.steps();
        let mut worst = T::zero();
        for j in 0..last {
            for i in j + 1..last {
                let fd = (field(self, i + 1, j) - field(self, i - 1, j)) / two_dt;
                let r = (fd - rhs(self, i, j)).amax();
                worst = worst.max(r);
            }
        }
        worst
    }
}

/// Directional-derivative kernels `Φ₁`, `Ψ₁`, `F₁` at the bundle's gain,
/// evaluated lazily on node triples `t >= θ >= s` where `θ` is the time at
/// which the gain is perturbed. Scalar scenarios only.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeKernels<'a, T: Real> {
    k: &'a ScalarKernels<T>,
    c: &'a [T],
    d: &'a [T],
    dt: T,
}

impl<'a, T: Real> DerivativeKernels<'a, T> {
    pub fn new(bundle: &'a KernelBundle<T>, scenario: &'a Scenario<T>) -> Result<Self> {
        bundle.grid.check_same(scenario.grid())?;
        let sc = scenario.scalar()?;
        Ok(Self {
            k: bundle.scalar()?,
            c: &sc.c,
            d: &sc.d,
            dt: bundle.grid.dt(),
        })
    }

    fn check(&self, t: usize, s: usize, theta: usize) -> Result<()> {
        if !(s <= theta && theta <= t && t < self.c.len()) {
            return Err(Error::OutOfRange { t, theta, s });
        }
        Ok(())
    }

    pub fn phi1(&self, t: usize, s: usize, theta: usize) -> Result<T> {
        self.check(t, s, theta)?;
        Ok(-(self.c[theta] + self.d[theta]) * self.k.phi.at(t, s))
    }

    pub fn psi1(&self, t: usize, s: usize, theta: usize) -> Result<T> {
        self.check(t, s, theta)?;
        Ok(self.psi1_unchecked(t, s, theta))
    }

    #[inline]
    pub(crate) fn psi1_unchecked(&self, t: usize, s: usize, theta: usize) -> T {
        -self.c[theta] * self.k.psi.at(t, s)
    }

    pub fn f1(&self, t: usize, s: usize, theta: usize, form: Formula) -> Result<T> {
        self.check(t, s, theta)?;
        Ok(self.f1_unchecked(t, s, theta, form))
    }

    #[inline]
    pub(crate) fn f1_unchecked(&self, t: usize, s: usize, theta: usize, form: Formula) -> T {
        let k = self.k;
        let (c, d) = (self.c[theta], self.d[theta]);
        match form {
            Formula::Corrected => {
                -c * k.psi.at(t, theta) * k.f.at(theta, s)
                    - d * k.psi.at(t, theta) * k.phi.at(theta, s)
                    - (c + d) * k.f.at(t, theta) * k.phi.at(theta, s)
            }
            Formula::Published => {
                let first = trapezoid_by(s, theta, self.dt, |r| {
                    k.psi.at(t, r) * k.m[r] * k.phi.at(r, s)
                });
                let third = trapezoid_by(s, theta, self.dt, |r| {
                    k.psi.at(t, r) * k.m[r] * k.phi.at(t, r)
                });
                -c * first + k.psi.at(t, theta) * d * k.phi.at(theta, s) - (c + d) * third
            }
        }
    }

    fn tilde(&self, t: usize, s: usize, beta: &[T], kernel: impl Fn(usize) -> T) -> Result<T> {
        self.check(t, s, s)?;
        if beta.len() != self.c.len() {
            return Err(Error::LengthMismatch {
                expected: self.c.len(),
                got: beta.len(),
            });
        }
        Ok(trapezoid_by(s, t, self.dt, |th| kernel(th) * beta[th]))
    }

    /// Directional derivative of `Φ(t, s)` along `beta`.
    pub fn phi_tilde(&self, t: usize, s: usize, beta: &[T]) -> Result<T> {
        self.tilde(t, s, beta, |th| {
            -(self.c[th] + self.d[th]) * self.k.phi.at(t, s)
        })
    }

    pub fn psi_tilde(&self, t: usize, s: usize, beta: &[T]) -> Result<T> {
        self.tilde(t, s, beta, |th| self.psi1_unchecked(t, s, th))
    }

    pub fn f_tilde(&self, t: usize, s: usize, beta: &[T], form: Formula) -> Result<T> {
        self.tilde(t, s, beta, |th| self.f1_unchecked(t, s, th, form))
    }
}
