//! Uniform time grids, composite trapezoid quadrature and storage for
//! two-time kernels on the lower triangle `s <= t`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::{from_usize, lit, Real};

/// Uniform discretization `t_i = i * dt` of `[0, T]` with `N` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    horizon: T,
    steps: usize,
    dt: T,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / from_usize(steps),
        })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `N + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Node `t_i`; the last node is exactly `T`.
    pub fn node(&self, i: usize) -> T {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.horizon
        } else {
            self.dt * from_usize(i)
        }
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Samples `f` at every node.
    pub fn sample<F: Fn(T) -> T>(&self, f: F) -> Vec<T> {
        (0..self.len()).map(|i| f(self.node(i))).collect()
    }

    /// Trapezoid integral over nodes `a..=b` of `samples`, which must hold
    /// exactly `b - a + 1` values.
    pub fn integrate(&self, a: usize, b: usize, samples: &[T]) -> Result<T> {
        if b < a || b > self.steps {
            return Err(Error::InvalidArgument(format!("bad node range {a}..={b}")));
        }
        if samples.len() != b - a + 1 {
            return Err(Error::LengthMismatch {
                expected: b - a + 1,
                got: samples.len(),
            });
        }
        trapezoid(samples, self.dt)
    }

    pub fn check_same(&self, other: &TimeGrid<T>) -> Result<()> {
        if self.steps != other.steps || self.horizon != other.horizon {
            return Err(Error::GridMismatch(format!(
                "[0, {}] / {} steps vs [0, {}] / {} steps",
                self.horizon, self.steps, other.horizon, other.steps
            )));
        }
        Ok(())
    }
}

/// Composite trapezoid rule on equally spaced samples. A single sample is an
/// empty interval and integrates to zero.
pub fn trapezoid<T: Real>(samples: &[T], dt: T) -> Result<T> {
    match samples {
        [] => Err(Error::LengthMismatch {
            expected: 1,
            got: 0,
        }),
        [_] => Ok(T::zero()),
        [first, inner @ .., last] => {
            let interior = inner.iter().fold(T::zero(), |acc, &v| acc + v);
            Ok(dt * (interior + (*first + *last) * lit(0.5)))
        }
    }
}

/// Trapezoid of `f(k)` for `k` in `a..=b` without materializing samples.
#[inline]
pub fn trapezoid_by<T: Real, F: FnMut(usize) -> T>(a: usize, b: usize, dt: T, mut f: F) -> T {
    if b <= a {
        return T::zero();
    }
    let mut acc = (f(a) + f(b)) * lit(0.5);
    for k in a + 1..b {
        acc += f(k);
    }
    acc * dt
}

/// Running trapezoid integral: `out[i]` is the integral over nodes `0..=i`.
pub fn cumulative_trapezoid<T: Real>(samples: &[T], dt: T) -> Vec<T> {
    let mut out = Vec::with_capacity(samples.len());
    let mut acc = T::zero();
    for (i, &v) in samples.iter().enumerate() {
        if i > 0 {
            acc += (samples[i - 1] + v) * dt * lit(0.5);
        }
        out.push(acc);
    }
    out
}

/// Two-time field `G(t_i, s_j)` stored on the closed lower triangle
/// `0 <= j <= i <= N`, row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularKernel<E> {
    nodes: usize,
    data: Vec<E>,
}

impl<E> TriangularKernel<E> {
    #[inline]
    fn offset(i: usize, j: usize) -> usize {
        i * (i + 1) / 2 + j
    }

    pub fn from_fn<F: FnMut(usize, usize) -> E>(nodes: usize, mut f: F) -> Self {
        let mut data = Vec::with_capacity(nodes * (nodes + 1) / 2);
        for i in 0..nodes {
            for j in 0..=i {
                data.push(f(i, j));
            }
        }
        Self { nodes, data }
    }

    /// Fills rows in parallel; each cell has exactly one writer.
    pub fn par_from_fn<F>(nodes: usize, f: F) -> Self
    where
        E: Send,
        F: Fn(usize, usize) -> E + Sync,
    {
        let rows: Vec<Vec<E>> = (0..nodes)
            .into_par_iter()
            .map(|i| (0..=i).map(|j| f(i, j)).collect())
            .collect();
        Self {
            nodes,
            data: rows.into_iter().flatten().collect(),
        }
    }

    /// Number of grid nodes on each axis.
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Entry at `(i, j)`; panics if `j > i` or `i` is past the grid.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &E {
        assert!(
            j <= i && i < self.nodes,
            "kernel index ({i}, {j}) outside lower triangle"
        );
        &self.data[Self::offset(i, j)]
    }

    pub fn try_get(&self, i: usize, j: usize) -> Option<&E> {
        (j <= i && i < self.nodes).then(|| &self.data[Self::offset(i, j)])
    }

    pub fn map<U, F: FnMut(&E) -> U>(&self, f: F) -> TriangularKernel<U> {
        TriangularKernel {
            nodes: self.nodes,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Iterates `(i, j, value)` row by row.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &E)> {
        (0..self.nodes).flat_map(move |i| (0..=i).map(move |j| (i, j, self.get(i, j))))
    }
}

impl<T: Real> TriangularKernel<T> {
    /// Scalar entry by value.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        *self.get(i, j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = TimeGrid::new(2.0f64, 200).unwrap();
        assert_eq!(g.len(), 201);
        assert!((g.dt() - 0.01).abs() < 1e-15);
        assert_eq!(g.node(200), 2.0);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }

    #[test]
    fn grid_is_strictly_increasing() {
        let g = TimeGrid::new(3.7f64, 137).unwrap();
        let nodes = g.nodes();
        assert_eq!(nodes[0], 0.0);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert!((g.dt() * 137.0 - 3.7).abs() <= f64::EPSILON * 4.0);
    }

    #[test]
    fn trapezoid_exact_on_affine() {
        let g = TimeGrid::new(1.0f64, 100).unwrap();
        let v = g.integrate(0, 100, &g.sample(|t| t)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_exponential() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let v = g.integrate(0, 100, &g.sample(f64::exp)).unwrap();
        assert!((v - (1f64.exp() - 1.0)).abs() < 2e-5);
    }

    #[test]
    fn trapezoid_empty_interval_and_mismatch() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert_eq!(g.integrate(3, 3, &[7.0]).unwrap(), 0.0);
        assert!(matches!(
            g.integrate(2, 5, &[1.0, 2.0]),
            Err(Error::LengthMismatch {
                expected: 4,
                got: 2
            })
        ));
        assert!(g.integrate(5, 2, &[]).is_err());
    }

    #[test]
    fn trapezoid_refinement_ratio() {
        let err = |n: usize| {
            let g = TimeGrid::new(1.0, n).unwrap();
            (g.integrate(0, n, &g.sample(f64::exp)).unwrap() - (1f64.exp() - 1.0)).abs()
        };
        for n in [10, 20, 40, 80] {
            let ratio = err(n) / err(2 * n);
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio} at n = {n}");
        }
    }

    #[test]
    fn trapezoid_by_matches_slice_version() {
        let s: Vec<f64> = (0..9).map(|k| (k as f64).sin()).collect();
        let a = trapezoid(&s[2..], 0.1).unwrap();
        let b = trapezoid_by(2, 8, 0.1, |k| s[k]);
        assert!((a - b).abs() < 1e-15);
        let cum = cumulative_trapezoid(&s, 0.1);
        assert!((cum[8] - trapezoid(&s, 0.1).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_in_f32() {
        let g = TimeGrid::new(1.0f32, 50).unwrap();
        let v = g.integrate(0, 50, &g.sample(|t| t * t)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn kernel_storage() {
        let k = TriangularKernel::from_fn(5, |i, j| (i * 10 + j) as f64);
        assert_eq!(k.at(3, 2), 32.0);
        assert_eq!(k.at(4, 4), 44.0);
        assert!(k.try_get(2, 3).is_none());
        assert_eq!(k.iter().count(), 15);
        let p = TriangularKernel::par_from_fn(5, |i, j| (i * 10 + j) as f64);
        assert_eq!(k, p);
    }

    #[test]
    #[should_panic]
    fn kernel_upper_triangle_panics() {
        let k = TriangularKernel::from_fn(3, |_, _| 0.0);
        k.get(0, 1);
    }

    proptest! {
        #[test]
        fn trapezoid_is_linear(
            f in proptest::collection::vec(-10.0f64..10.0, 2..40),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let g: Vec<f64> = f.iter().map(|x| x.cos()).collect();
            let comb: Vec<f64> = f.iter().zip(&g).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = trapezoid(&comb, 0.01).unwrap();
            let rhs = alpha * trapezoid(&f, 0.01).unwrap() + beta * trapezoid(&g, 0.01).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
