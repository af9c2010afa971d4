//! Ready-made scenarios on `[0, 1]`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{
    build_scenario, standard_measure, InitialMeasure, MeasureKind, RawCoefficients, Scenario,
};
use crate::numerics::TimeGrid;
use crate::real::{lit, Real};

/// Gauss–Hermite nodes used for the standard normal initial law.
pub const NORMAL_FLOW_NODES: usize = 11;

/// `A = B = D = 0`, `C = σ = γ = 1`, `Q = Q₀ = Σ = 1`, `μ₀ = δ₀`. The optimal
/// gain is `tanh`.
pub fn classical<T: Real>(steps: usize) -> Result<Scenario<T>> {
    build_scenario(
        &RawCoefficients::scalar(),
        InitialMeasure::dirac(DVector::zeros(1)),
        TimeGrid::new(T::one(), steps)?,
    )
}

/// `σ(u, t) = γ(u, t) = u` with a standard normal initial law, `A = B = D = 0`
/// and `C = 1`. The optimal gain is `C M` with `M' = 1 - M²`.
pub fn normal_flow<T: Real>(steps: usize) -> Result<Scenario<T>> {
    let raw = RawCoefficients::scalar()
        .state_noise(|u: &DVector<T>, _| u[0])
        .observation_noise(|u: &DVector<T>, _| u[0]);
    build_scenario(
        &raw,
        standard_measure(&MeasureKind::GaussHermite {
            nodes: NORMAL_FLOW_NODES,
            dim: 1,
        })?,
        TimeGrid::new(T::one(), steps)?,
    )
}

/// Scalar scenario whose coefficients are random trigonometric polynomials
/// of degree one, with nonzero interaction `B` and `D`, atom-dependent noise
/// and a three-point initial law.
pub fn random_smooth<T: Real>(seed: u64, steps: usize) -> Result<Scenario<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coef = |lo: f64, hi: f64| -> (T, T, T) {
        (
            lit(rng.gen_range(lo..hi)),
            lit(rng.gen_range(-0.25..0.25)),
            lit(rng.gen_range(1.0..4.0)),
        )
    };
    let smooth = |(c0, c1, w): (T, T, T)| move |t: T| c0 + c1 * (w * t).sin();
    let (a, b, c, d) = (
        coef(-1.0, 0.5),
        coef(0.4, 1.0),
        coef(0.5, 1.5),
        coef(0.3, 0.9),
    );
    let (s, g) = (coef(0.5, 1.0), coef(0.3, 0.8));
    let (fs, fg) = (smooth(s), smooth(g));
    let raw = RawCoefficients::scalar()
        .drift(smooth(a))
        .interaction(smooth(b))
        .observation(smooth(c))
        .observation_interaction(smooth(d))
        .state_noise(move |u: &DVector<T>, t| fs(t) * (T::one() + lit::<T>(0.2) * u[0]))
        .observation_noise(move |u: &DVector<T>, t| fg(t) + lit::<T>(0.1) * u[0] * u[0]);
    let measure = standard_measure(&MeasureKind::GaussHermite { nodes: 3, dim: 1 })?;
    build_scenario(&raw, measure, TimeGrid::new(T::one(), steps)?)
}

/// Scalar scenario with strong interaction and observation noise that
/// dominates the state noise, so the pairing of the observation-noise cross
/// terms changes `K` well beyond Monte Carlo error. Use with
/// [`CROSS_TERM_GAIN`].
pub fn cross_term_probe<T: Real>(steps: usize) -> Result<Scenario<T>> {
    let raw = RawCoefficients::scalar()
        .interaction(|_| lit::<T>(0.8))
        .observation_interaction(|_| T::one())
        .state_noise(|_: &DVector<T>, _| lit::<T>(0.3))
        .observation_noise(|_: &DVector<T>, _| T::one());
    build_scenario(
        &raw,
        InitialMeasure::dirac(DVector::zeros(1)),
        TimeGrid::new(T::one(), steps)?,
    )
}

/// Constant gain used with [`cross_term_probe`].
pub const CROSS_TERM_GAIN: f64 = 1.5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::measure_averages;

    #[test]
    fn presets_build() {
        let c = classical::<f64>(10).unwrap();
        assert!(c.is_scalar());
        let n = normal_flow::<f64>(10).unwrap();
        assert_eq!(n.measure().len(), NORMAL_FLOW_NODES);
        let bars = measure_averages(&n).scalar().unwrap();
        assert!(bars.sigma_bar[3].abs() < 1e-12);
        assert!((bars.sigma_sq[3] - 1.0).abs() < 1e-12);
        assert!(cross_term_probe::<f32>(10).unwrap().is_scalar());
    }

    #[test]
    fn random_smooth_is_seeded_and_interacting() {
        let a = random_smooth::<f64>(5, 20).unwrap();
        let b = random_smooth::<f64>(5, 20).unwrap();
        let c = random_smooth::<f64>(6, 20).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        let sc = a.scalar().unwrap();
        assert!(sc.b.iter().all(|&v| v.abs() > 0.0) && sc.d.iter().all(|&v| v.abs() > 0.0));
    }
}
