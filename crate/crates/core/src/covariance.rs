//! Error covariance `K(u, t)`, its time-derivative split `K₁`, the
//! directional-derivative kernels `K₂`/`K̄₂`, the cost `J` and its gradient.
//!
//! The error of the particle started at `u` is
//!
//! ```text
//! e(u, t) = ∫₀ᵗ a(t, s) dW(s) - ∫₀ᵗ b(t, s) dV(s)
//! a = F σ̄ + Ψ σ(u),    b = F Γ γ̄ + Ψ Γ γ(u)
//! ```
//!
//! so `K = ∫₀ᵗ a Q a' + b Q₀ b' ds`. Everything here is a quadrature of that
//! representation on the grid; nothing is time-stepped.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{DerivativeKernels, GainSchedule, KernelBundle, ScalarKernels};
use crate::model::{measure_averages, BarQuantities, ScalarBars, ScalarSamples, Scenario};
use crate::numerics::{trapezoid_by, TimeGrid};
use crate::real::{lit, Real};
use crate::Formula;

fn trapezoid_weight<T: Real>(k: usize, a: usize, b: usize) -> T {
    if k == a || k == b {
        lit(0.5)
    } else {
        T::one()
    }
}

fn check_inputs<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    atom: usize,
    node: usize,
) -> Result<()> {
    scenario.grid().check_same(bundle.grid())?;
    scenario.check_atom(atom)?;
    if node >= scenario.grid().len() {
        return Err(Error::InvalidArgument(format!("node {node} past the grid")));
    }
    Ok(())
}

/// Integrand of the covariance representation at `(t_i, s_j)`.
fn k_integrand<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    bars: &BarQuantities<T>,
    atom: usize,
    i: usize,
    j: usize,
    cross: Formula,
) -> DMatrix<T> {
    let (f, psi) = (bundle.f(i, j), bundle.psi(i, j));
    let g = bundle.gain().value(j);
    let (q, q0) = (scenario.q(), scenario.q0());
    let (sb, gb) = (&bars.sigma_bar[j], &bars.gamma_bar[j]);
    let (s, gm) = (scenario.sigma(atom, j), scenario.gamma(atom, j));
    match cross {
        Formula::Corrected => {
            let a = &f * sb + &psi * s;
            let b = &f * g * gb + &psi * g * gm;
            &a * q * a.transpose() + &b * q0 * b.transpose()
        }
        Formula::Published => {
            let fs = &f * sb;
            let fg = &f * g * gb;
            let ps = &psi * s;
            let pg = &psi * g * gm;
            &fs * q * fs.transpose()
                + &fg * q0 * fg.transpose()
                + &ps * q * ps.transpose()
                + &pg * q0 * pg.transpose()
                + &ps * q * fs.transpose()
                + &fs * q * ps.transpose()
                + &pg * q0 * fs.transpose()
                + &fs * q0 * pg.transpose()
        }
    }
}

fn symmetrize<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    (&m + m.transpose()) * lit::<T>(0.5)
}

/// `K(u, t_i)` for the atom with index `atom`. `cross` selects how the
/// mean-error / observation-noise cross terms are paired.
pub fn covariance_k<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    bars: &BarQuantities<T>,
    atom: usize,
    node: usize,
    cross: Formula,
) -> Result<DMatrix<T>> {
    check_inputs(scenario, bundle, atom, node)?;
    let n = scenario.dims().state;
    let mut acc = DMatrix::zeros(n, n);
    for j in (0..=node).filter(|_| node > 0) {
        acc += k_integrand(scenario, bundle, bars, atom, node, j, cross)
            * trapezoid_weight::<T>(j, 0, node);
    }
    Ok(symmetrize(acc * scenario.grid().dt()))
}

/// `K₁(u, t_i)` with `K̇ = K₁ + K₁'`.
pub fn k1_term<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    bars: &BarQuantities<T>,
    atom: usize,
    node: usize,
    form: Formula,
) -> Result<DMatrix<T>> {
    check_inputs(scenario, bundle, atom, node)?;
    let i = node;
    let n = scenario.dims().state;
    let (q, q0) = (scenario.q(), scenario.q0());
    let (h, m) = (bundle.h(i), bundle.m(i));
    let mut acc = DMatrix::zeros(n, n);
    for j in (0..=i).filter(|_| i > 0) {
        let (f, psi, phi) = (bundle.f(i, j), bundle.psi(i, j), bundle.phi(i, j));
        let g = bundle.gain().value(j);
        let (sb, gb) = (&bars.sigma_bar[j], &bars.gamma_bar[j]);
        let (s, gm) = (scenario.sigma(atom, j), scenario.gamma(atom, j));
        let f_dot = m * &phi + h * &f;
        let term = match form {
            Formula::Corrected => {
                let a = &f * sb + &psi * s;
                let b = &f * g * gb + &psi * g * gm;
                let a_dot = &f_dot * sb + h * &psi * s;
                let b_dot = &f_dot * g * gb + h * &psi * g * gm;
                &a_dot * q * a.transpose() + &b_dot * q0 * b.transpose()
            }
            Formula::Published => {
                let lead = m * &phi + h;
                let fs = &f * sb;
                let hps = h * &psi * s;
                let hpg = h * &psi * g * gm;
                &lead * sb * q * fs.transpose()
                    + &lead * g * gb * q0 * (&f * g * gb).transpose()
                    + &hps * q * (&psi * s).transpose()
                    + &hpg * q0 * (&psi * g * gm).transpose()
                    + &hps * q * fs.transpose()
                    + &psi * s * q * (&f_dot * sb).transpose()
                    + &hpg * q0 * fs.transpose()
                    + &psi * g * gm * q0 * (&f_dot * sb).transpose()
            }
        };
        acc += term * trapezoid_weight::<T>(j, 0, i);
    }
    acc *= scenario.grid().dt();
    if form == Formula::Corrected {
        let g = bundle.gain().value(i);
        let s = scenario.sigma(atom, i);
        let gm = scenario.gamma(atom, i);
        acc +=
            (s * q * s.transpose() + g * gm * q0 * gm.transpose() * g.transpose()) * lit::<T>(0.5);
    }
    Ok(acc)
}

/// `K(u_k, t_i)` for every atom and node.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceField<T: Real> {
    /// `values[atom][node]`.
    pub values: Vec<Vec<DMatrix<T>>>,
    pub gain: GainSchedule<T>,
}

impl<T: Real> CovarianceField<T> {
    pub fn compute(
        scenario: &Scenario<T>,
        bundle: &KernelBundle<T>,
        bars: &BarQuantities<T>,
    ) -> Result<Self> {
        Self::compute_with(scenario, bundle, bars, Formula::Corrected)
    }

    pub fn compute_with(
        scenario: &Scenario<T>,
        bundle: &KernelBundle<T>,
        bars: &BarQuantities<T>,
        cross: Formula,
    ) -> Result<Self> {
        scenario.grid().check_same(bundle.grid())?;
        let len = scenario.grid().len();
        let values = if let (Ok(sc), Ok(k), Formula::Corrected) =
            (scenario.scalar(), bundle.scalar(), cross)
        {
            let sb = bars.scalar()?;
            (0..scenario.measure().len())
                .map(|atom| {
                    scalar_covariance(sc, k, &sb, atom, scenario.grid())
                        .into_iter()
                        .map(|v| DMatrix::from_element(1, 1, v))
                        .collect()
                })
                .collect()
        } else {
            (0..scenario.measure().len())
                .map(|atom| {
                    (0..len)
                        .into_par_iter()
                        .map(|i| covariance_k(scenario, bundle, bars, atom, i, cross))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            values,
            gain: bundle.gain().clone(),
        })
    }

    pub fn get(&self, atom: usize, node: usize) -> &DMatrix<T> {
        &self.values[atom][node]
    }
}

/// Scalar `K(u_atom, t_i)` for every node.
fn scalar_covariance<T: Real>(
    sc: &ScalarSamples<T>,
    k: &ScalarKernels<T>,
    bars: &ScalarBars<T>,
    atom: usize,
    grid: &TimeGrid<T>,
) -> Vec<T> {
    let (sig, gam) = (&sc.sigma[atom], &sc.gamma[atom]);
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            trapezoid_by(0, i, grid.dt(), |j| {
                let a = k.f.at(i, j) * bars.sigma_bar[j] + k.psi.at(i, j) * sig[j];
                let b = k.f.at(i, j) * bars.gamma_bar[j] + k.psi.at(i, j) * gam[j];
                a * a * sc.q + k.gain[j] * k.gain[j] * b * b * sc.q0
            })
        })
        .collect()
}

/// Cost `J = ∫∫ Tr(Σ K) dt μ₀(du)` by atom-weighted trapezoid.
pub fn cost_j<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    bars: &BarQuantities<T>,
) -> Result<T> {
    let field = CovarianceField::compute(scenario, bundle, bars)?;
    Ok(cost_from_field(scenario, &field))
}

pub fn cost_from_field<T: Real>(scenario: &Scenario<T>, field: &CovarianceField<T>) -> T {
    let grid = scenario.grid();
    scenario
        .measure()
        .atoms()
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (a, atom)| {
            let per_atom = trapezoid_by(0, grid.steps(), grid.dt(), |i| {
                (scenario.cost_weight(i) * field.get(a, i)).trace()
            });
            acc + atom.weight * per_atom
        })
}

/// Cost at an arbitrary gain, rebuilding the kernels.
pub fn cost_at<T: Real>(scenario: &Scenario<T>, gain: &GainSchedule<T>) -> Result<T> {
    let bundle = KernelBundle::new(scenario, gain)?;
    cost_j(scenario, &bundle, &measure_averages(scenario))
}

/// Evaluator for the scalar derivative kernels at one base gain.
#[derive(Debug, Clone)]
pub struct ScalarGateaux<'a, T: Real> {
    sc: &'a ScalarSamples<T>,
    k: &'a ScalarKernels<T>,
    dk: DerivativeKernels<'a, T>,
    bars: ScalarBars<T>,
    dt: T,
}

impl<'a, T: Real> ScalarGateaux<'a, T> {
    pub fn new(
        scenario: &'a Scenario<T>,
        bundle: &'a KernelBundle<T>,
        bars: &BarQuantities<T>,
    ) -> Result<Self> {
        Ok(Self {
            sc: scenario.scalar()?,
            k: bundle.scalar()?,
            dk: DerivativeKernels::new(bundle, scenario)?,
            bars: bars.scalar()?,
            dt: scenario.grid().dt(),
        })
    }

    fn check(&self, t: usize, s: usize) -> Result<()> {
        if s > t || t >= self.k.h.len() {
            return Err(Error::OutOfRange { t, theta: s, s });
        }
        Ok(())
    }

    /// `K₂(u_atom, t, r)`: density of the derivative of `K(u, t)` with
    /// respect to a gain perturbation at `r`.
    pub fn k2(&self, atom: usize, t: usize, r: usize, form: Formula) -> Result<T> {
        self.check(t, r)?;
        if atom >= self.sc.sigma.len() {
            return Err(Error::UnknownAtom(atom));
        }
        Ok(self.k2_unchecked(atom, t, r, form))
    }

    fn k2_unchecked(&self, atom: usize, t: usize, r: usize, form: Formula) -> T {
        let (k, dk, b) = (self.k, &self.dk, &self.bars);
        let (sig, gam) = (&self.sc.sigma[atom], &self.sc.gamma[atom]);
        let (q, q0) = (self.sc.q, self.sc.q0);
        let g = &k.gain;
        let half = match form {
            Formula::Corrected => {
                let bhat = k.f.at(t, r) * b.gamma_bar[r] + k.psi.at(t, r) * gam[r];
                let boundary = g[r] * bhat * bhat * q0;
                boundary
                    + trapezoid_by(0, r, self.dt, |s| {
                        let a = k.f.at(t, s) * b.sigma_bar[s] + k.psi.at(t, s) * sig[s];
                        let bh = k.f.at(t, s) * b.gamma_bar[s] + k.psi.at(t, s) * gam[s];
                        let g2 = g[s] * g[s];
                        dk.f1_unchecked(t, s, r, Formula::Corrected)
                            * (b.sigma_bar[s] * a * q + g2 * b.gamma_bar[s] * bh * q0)
                            + dk.psi1_unchecked(t, s, r) * (sig[s] * a * q + g2 * gam[s] * bh * q0)
                    })
            }
            Formula::Published => {
                let (f, p) = (k.f.at(t, r), k.psi.at(t, r));
                let boundary = f * f * g[r] * b.gamma_bar[r].powi(2)
                    + p * p * g[r] * gam[r] * gam[r]
                    + lit::<T>(0.5) * p * f * b.sigma_bar[r] * gam[r];
                boundary
                    + trapezoid_by(0, r, self.dt, |s| {
                        let f1 = dk.f1_unchecked(t, s, r, Formula::Published);
                        let p1 = dk.psi1_unchecked(t, s, r);
                        let (f, p, sb, gb) =
                            (k.f.at(t, s), k.psi.at(t, s), b.sigma_bar[s], b.gamma_bar[s]);
                        lit::<T>(0.5) * f1 * f * (sb * sb + g[s] * g[s] * gb * gb)
                            + f1 * sb * p * (sig[s] + g[s] * gam[s])
                            + p1 * p * (sig[s] * sig[s] + g[s] * g[s] * gam[s] * gam[s])
                            + p1 * f * sb * (sig[s] + g[s] * gam[s])
                    })
            }
        };
        half * lit(2.0)
    }

    /// `K̄₂(t, r)` as the `μ₀`-weighted sum of [`ScalarGateaux::k2`].
    pub fn k2_bar_by_atoms(&self, t: usize, r: usize, form: Formula) -> Result<T> {
        self.check(t, r)?;
        Ok(self
            .sc
            .weights
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (a, &w)| {
                acc + w * self.k2_unchecked(a, t, r, form)
            }))
    }

    /// `K̄₂(t, r)` directly from the averaged diffusion coefficients.
    pub fn k2_bar(&self, t: usize, r: usize, form: Formula) -> Result<T> {
        self.check(t, r)?;
        Ok(self.k2_bar_unchecked(t, r, form))
    }

    fn k2_bar_unchecked(&self, t: usize, r: usize, form: Formula) -> T {
        let (k, dk, b) = (self.k, &self.dk, &self.bars);
        let (q, q0) = (self.sc.q, self.sc.q0);
        let g = &k.gain;
        let half = match form {
            Formula::Corrected => {
                let (f, p) = (k.f.at(t, r), k.psi.at(t, r));
                let gb2 = b.gamma_bar[r] * b.gamma_bar[r] * q0;
                let boundary =
                    g[r] * ((f * f + lit::<T>(2.0) * f * p) * gb2 + p * p * b.gamma_sq[r]);
                boundary
                    + trapezoid_by(0, r, self.dt, |s| {
                        let (f, p) = (k.f.at(t, s), k.psi.at(t, s));
                        let sb2 = b.sigma_bar[s] * b.sigma_bar[s] * q;
                        let gb2 = b.gamma_bar[s] * b.gamma_bar[s] * q0;
                        let g2 = g[s] * g[s];
                        dk.f1_unchecked(t, s, r, Formula::Corrected) * (f + p) * (sb2 + g2 * gb2)
                            + dk.psi1_unchecked(t, s, r)
                                * (f * sb2 + p * b.sigma_sq[s] + g2 * (f * gb2 + p * b.gamma_sq[s]))
                    })
            }
            Formula::Published => {
                let (f, p) = (k.f.at(t, r), k.psi.at(t, r));
                let boundary = f * f * g[r] * b.gamma_bar[r].powi(2)
                    + p * p * g[r] * b.gamma_sq[r]
                    + lit::<T>(0.5) * p * f * b.sigma_bar[r] * b.gamma_bar[r];
                boundary
                    + trapezoid_by(0, r, self.dt, |s| {
                        let f1 = dk.f1_unchecked(t, s, r, Formula::Published);
                        let p1 = dk.psi1_unchecked(t, s, r);
                        let (f, p, sb, gb) =
                            (k.f.at(t, s), k.psi.at(t, s), b.sigma_bar[s], b.gamma_bar[s]);
                        f1 * f * (sb * sb + g[s] * g[s] * gb * gb)
                            + f1 * sb * p * (sb + g[s] * gb)
                            + p1 * p * (b.sigma_sq[s] + g[s] * g[s] * b.gamma_sq[s])
                            + p1 * f * sb * (sb + g[s] * gb)
                    })
            }
        };
        half * lit(2.0)
    }

    /// Directional derivative of `K(u, t)` along `beta`: `∫₀ᵗ K₂ β`.
    pub fn k_tilde(&self, atom: usize, t: usize, beta: &[T], form: Formula) -> Result<T> {
        self.check(t, 0)?;
        if atom >= self.sc.sigma.len() {
            return Err(Error::UnknownAtom(atom));
        }
        Ok(trapezoid_by(0, t, self.dt, |r| {
            self.k2_unchecked(atom, t, r, form) * beta[r]
        }))
    }

    /// `g(r) = ∫ᵣᵀ Σ(t) K̄₂(t, r) dt` at every node.
    pub fn gradient(&self, form: Formula) -> GradientField<T> {
        let last = self.k.h.len() - 1;
        let values = (0..=last)
            .into_par_iter()
            .map(|r| {
                trapezoid_by(r, last, self.dt, |t| {
                    self.sc.cost_weight[t] * self.k2_bar_unchecked(t, r, form)
                })
            })
            .collect();
        GradientField {
            values,
            dt: self.dt,
        }
    }

    /// `K̄₂(T, T)`, the limit of `g(r) / ∫ᵣᵀ Σ` as `r → T`.
    pub fn terminal_density(&self, form: Formula) -> T {
        let last = self.k.h.len() - 1;
        self.k2_bar_unchecked(last, last, form)
    }

    /// Coefficient of `Γ(r)` in the boundary term of `K̄₂(t, r)`, which is
    /// `2 ∫ (F γ̄ + Ψ γ(u))² Q₀ μ₀(du)` and never negative.
    pub fn gain_curvature(&self, t: usize, r: usize) -> T {
        let (f, p) = (self.k.f.at(t, r), self.k.psi.at(t, r));
        let gb2 = self.bars.gamma_bar[r].powi(2) * self.sc.q0;
        ((f * f + lit::<T>(2.0) * f * p) * gb2 + p * p * self.bars.gamma_sq[r]) * lit(2.0)
    }
}

/// `K₂(u_atom, t_i, t_r)`; scalar scenarios only.
pub fn k2_kernel<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    bars: &BarQuantities<T>,
    atom: usize,
    t: usize,
    r: usize,
    form: Formula,
) -> Result<T> {
    ScalarGateaux::new(scenario, bundle, bars)?.k2(atom, t, r, form)
}

/// `K̄₂(t_i, t_r)` from the averaged coefficients; scalar scenarios only.
pub fn k2_bar<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    bars: &BarQuantities<T>,
    t: usize,
    r: usize,
    form: Formula,
) -> Result<T> {
    ScalarGateaux::new(scenario, bundle, bars)?.k2_bar(t, r, form)
}

/// Gradient density `g` of `J` at the bundle's gain, so that the directional
/// derivative along `β` is `∫₀ᵀ g β dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField<T> {
    pub values: Vec<T>,
    pub dt: T,
}

impl<T: Real> GradientField<T> {
    /// `∫₀ᵀ g β dt` by trapezoid.
    pub fn pairing(&self, beta: &[T]) -> Result<T> {
        if beta.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                got: beta.len(),
            });
        }
        Ok(trapezoid_by(0, beta.len() - 1, self.dt, |i| {
            self.values[i] * beta[i]
        }))
    }

    pub fn sup_norm(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }
}

pub fn gradient_g<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    bars: &BarQuantities<T>,
) -> Result<GradientField<T>> {
    Ok(ScalarGateaux::new(scenario, bundle, bars)?.gradient(Formula::Corrected))
}

/// Central difference `(J(Γ + εβ) - J(Γ - εβ)) / 2ε` with kernels rebuilt
/// at both perturbed gains.
pub fn fd_gateaux_oracle<T: Real>(
    scenario: &Scenario<T>,
    gain: &GainSchedule<T>,
    beta: &GainSchedule<T>,
    eps: T,
) -> Result<T> {
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let plus = cost_at(scenario, &gain.perturbed(beta, eps)?)?;
    let minus = cost_at(scenario, &gain.perturbed(beta, -eps)?)?;
    Ok((plus - minus) / (eps * lit(2.0)))
}

/// Worst relative sup-norm mismatch, over atoms, between the central time
/// difference of `K(u, ·)` and `K₁ + K₁'` at interior nodes. Atoms whose
/// covariance vanishes identically are skipped.
pub fn derivative_consistency<T: Real>(
    scenario: &Scenario<T>,
    bundle: &KernelBundle<T>,
    bars: &BarQuantities<T>,
    form: Formula,
) -> Result<T> {
    let field = CovarianceField::compute(scenario, bundle, bars)?;
    let steps = scenario.grid().steps();
    let two_dt = scenario.grid().dt() * lit(2.0);
    let mut worst = T::zero();
    for atom in 0..scenario.measure().len() {
        let rows = (1..steps)
            .into_par_iter()
            .map(|i| {
                let k1 = k1_term(scenario, bundle, bars, atom, i, form)?;
                let analytic = &k1 + k1.transpose();
                let fd = (field.get(atom, i + 1) - field.get(atom, i - 1)) / two_dt;
                Ok(((fd - &analytic).amax(), analytic.amax()))
            })
            .collect::<Result<Vec<(T, T)>>>()?;
        let scale = rows.iter().fold(T::zero(), |acc, r| acc.max(r.1));
        let err = rows.iter().fold(T::zero(), |acc, r| acc.max(r.0));
        if scale > T::zero() {
            worst = worst.max(err / scale);
        } else if err > T::zero() {
            return Ok(T::max_value().unwrap_or(err));
        }
    }
    Ok(worst)
}
