//! TOML scenario files.
//!
//! ```toml
//! name = "example"
//! horizon = 1.0
//! steps = 200
//! gain = "tanh(t)"            # or "optimal"; zero when absent
//!
//! [dims]                      # all 1 when absent
//! state = 1
//! observation = 1
//! noise = 1
//!
//! [coefficients]              # scalars or nested arrays; numbers or strings
//! A = 0
//! C = "1 + 0.5 * t"
//! sigma = "u"
//! Q = 1.0
//!
//! [measure]
//! kind = "gauss-hermite"      # "dirac" | "discrete" | "gauss-hermite"
//! nodes = 11
//! ```

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context as _, Result};
use mfk_core::model::{build_scenario, standard_measure, Dims, MeasureKind, RawCoefficients};
use mfk_core::{GainSchedule, Scenario, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::expr::Expr;

pub const CLASSICAL: &str = include_str!("../scenarios/classical.toml");
pub const NORMAL_FLOW: &str = include_str!("../scenarios/normal-flow.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Cell {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Entry {
    Cell(Cell),
    Matrix(Vec<Vec<Cell>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Constant {
    Number(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Coefficients {
    #[serde(rename = "A")]
    a: Option<Entry>,
    #[serde(rename = "B")]
    b: Option<Entry>,
    #[serde(rename = "C")]
    c: Option<Entry>,
    #[serde(rename = "D")]
    d: Option<Entry>,
    sigma: Option<Entry>,
    gamma: Option<Entry>,
    #[serde(rename = "Sigma")]
    cost_weight: Option<Entry>,
    #[serde(rename = "Q")]
    q: Option<Constant>,
    #[serde(rename = "Q0")]
    q0: Option<Constant>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsSpec {
    state: usize,
    observation: usize,
    noise: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum MeasureSpec {
    Dirac {
        point: Vec<f64>,
    },
    Discrete {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    GaussHermite {
        nodes: usize,
        dim: Option<usize>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    #[serde(default = "one")]
    horizon: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    gain: Option<Entry>,
    dims: Option<DimsSpec>,
    #[serde(default)]
    coefficients: Coefficients,
    measure: Option<MeasureSpec>,
}

fn one() -> f64 {
    1.0
}

fn default_steps() -> usize {
    200
}

/// Matrix of expressions.
#[derive(Debug, Clone)]
struct ExprMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<Expr>,
}

impl ExprMatrix {
    fn from_entry(entry: &Entry, name: &str) -> Result<Self> {
        let cell = |c: &Cell| match c {
            Cell::Number(x) => Ok(Expr::constant(*x)),
            Cell::Text(s) => Expr::parse(s),
        };
        match entry {
            Entry::Cell(c) => Ok(Self {
                rows: 1,
                cols: 1,
                cells: vec![cell(c)?],
            }),
            Entry::Matrix(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                ensure!(
                    cols > 0 && rows.iter().all(|r| r.len() == cols),
                    "{name}: ragged or empty matrix"
                );
                let cells = rows.iter().flatten().map(cell).collect::<Result<_>>()?;
                Ok(Self {
                    rows: rows.len(),
                    cols,
                    cells,
                })
            }
        }
    }

    fn constant(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let cells = (0..rows * cols)
            .map(|k| Expr::constant(f(k / cols, k % cols)))
            .collect();
        Self { rows, cols, cells }
    }

    fn check(&self, name: &str, shape: (usize, usize), dim: usize) -> Result<()> {
        ensure!(
            (self.rows, self.cols) == shape,
            "{name} is {}x{}, expected {}x{}",
            self.rows,
            self.cols,
            shape.0,
            shape.1
        );
        for e in &self.cells {
            e.check(dim)
                .with_context(|| format!("coefficient {name}"))?;
        }
        Ok(())
    }

    fn eval(&self, t: f64, u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.cells[i * self.cols + j].eval_or_nan(t, u)
        })
    }

    fn scalar_expr(&self) -> Option<&Expr> {
        (self.rows == 1 && self.cols == 1).then(|| &self.cells[0])
    }
}

/// How the gain for `simulate`, `kernels`, `covariance` and `gradcheck` is
/// chosen.
#[derive(Debug, Clone)]
pub enum GainSpec {
    Zero,
    Expression(Arc<ExprMatrixHandle>),
    Optimal,
}

/// Opaque wrapper so [`GainSpec`] can be shared without exposing internals.
#[derive(Debug, Clone)]
pub struct ExprMatrixHandle(ExprMatrix);

/// A parsed and validated scenario file.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub horizon: f64,
    pub steps: usize,
    pub dims: Dims,
    pub gain: GainSpec,
    a: ExprMatrix,
    b: ExprMatrix,
    c: ExprMatrix,
    d: ExprMatrix,
    sigma: ExprMatrix,
    gamma: ExprMatrix,
    cost_weight: ExprMatrix,
    q: DMatrix<f64>,
    q0: DMatrix<f64>,
    measure: MeasureKind,
}

fn constant_matrix(c: &Option<Constant>, d: usize, name: &str) -> Result<DMatrix<f64>> {
    match c {
        None => Ok(DMatrix::identity(d, d)),
        Some(Constant::Number(x)) => {
            ensure!(d == 1, "{name} must be a {d}x{d} matrix");
            Ok(DMatrix::from_element(1, 1, *x))
        }
        Some(Constant::Matrix(rows)) => {
            ensure!(
                rows.len() == d && rows.iter().all(|r| r.len() == d),
                "{name} must be {d}x{d}"
            );
            Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
        }
    }
}

impl ScenarioSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).context("invalid scenario file")?;
        let dims = file
            .dims
            .map_or(Dims::SCALAR, |d| Dims::new(d.state, d.observation, d.noise));
        let Dims {
            state: n,
            observation: m,
            noise: nd,
        } = dims;
        ensure!(n > 0 && m > 0 && nd > 0, "dimensions must be positive");
        let measure = match file.measure {
            None => MeasureKind::Dirac(vec![0.0; n]),
            Some(MeasureSpec::Dirac { point }) => MeasureKind::Dirac(point),
            Some(MeasureSpec::Discrete { points, weights }) => {
                MeasureKind::Discrete { points, weights }
            }
            Some(MeasureSpec::GaussHermite { nodes, dim }) => MeasureKind::GaussHermite {
                nodes,
                dim: dim.unwrap_or(n),
            },
        };
        let co = &file.coefficients;
        let scalar = dims.is_scalar();
        let pick = |e: &Option<Entry>,
                    name: &str,
                    shape: (usize, usize),
                    default: Option<f64>|
         -> Result<ExprMatrix> {
            let mat = match (e, default) {
                (Some(e), _) => ExprMatrix::from_entry(e, name)?,
                (None, Some(v)) if scalar => ExprMatrix::constant(1, 1, |_, _| v),
                (None, _) if matches!(name, "A" | "B" | "D") => {
                    ExprMatrix::constant(shape.0, shape.1, |_, _| 0.0)
                }
                (None, _) if name == "Sigma" => {
                    ExprMatrix::constant(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
                }
                (None, _) => {
                    bail!("coefficient {name} is required when the scenario is not scalar")
                }
            };
            mat.check(name, shape, n)?;
            Ok(mat)
        };
        let gain = match &file.gain {
            None => GainSpec::Zero,
            Some(Entry::Cell(Cell::Text(s))) if s.trim() == "optimal" => GainSpec::Optimal,
            Some(e) => {
                let g = ExprMatrix::from_entry(e, "gain")?;
                g.check("gain", (n, m), 0)?;
                GainSpec::Expression(Arc::new(ExprMatrixHandle(g)))
            }
        };
        Ok(Self {
            name: file.name.unwrap_or_else(|| "scenario".into()),
            horizon: file.horizon,
            steps: file.steps,
            dims,
            gain,
            a: pick(&co.a, "A", (n, n), Some(0.0))?,
            b: pick(&co.b, "B", (n, n), Some(0.0))?,
            c: pick(&co.c, "C", (m, n), Some(1.0))?,
            d: pick(&co.d, "D", (m, n), Some(0.0))?,
            sigma: pick(&co.sigma, "sigma", (n, nd), Some(1.0))?,
            gamma: pick(&co.gamma, "gamma", (m, nd), Some(1.0))?,
            cost_weight: pick(&co.cost_weight, "Sigma", (n, n), Some(1.0))?,
            q: constant_matrix(&co.q, nd, "Q")?,
            q0: constant_matrix(&co.q0, nd, "Q0")?,
            measure,
        })
    }

    /// Built-in name (`classical`, `normal-flow`) or a file path.
    pub fn load(source: &str) -> Result<Self> {
        match source {
            "classical" => Self::parse(CLASSICAL),
            "normal-flow" => Self::parse(NORMAL_FLOW),
            path => {
                let text = std::fs::read_to_string(Path::new(path))
                    .with_context(|| format!("cannot read scenario file {path}"))?;
                Self::parse(&text).with_context(|| format!("in {path}"))
            }
        }
    }

    pub fn grid(&self, steps: Option<usize>) -> Result<TimeGrid<f64>> {
        Ok(TimeGrid::new(self.horizon, steps.unwrap_or(self.steps))?)
    }

    pub fn build(&self, steps: Option<usize>) -> Result<Scenario<f64>> {
        let time = |e: &ExprMatrix| {
            let e = e.clone();
            move |t: f64| e.eval(t, &[])
        };
        let field = |e: &ExprMatrix| {
            let e = e.clone();
            move |u: &DVector<f64>, t: f64| e.eval(t, u.as_slice())
        };
        let raw = RawCoefficients::zeros(self.dims)
            .drift(time(&self.a))
            .interaction(time(&self.b))
            .observation(time(&self.c))
            .observation_interaction(time(&self.d))
            .state_noise(field(&self.sigma))
            .observation_noise(field(&self.gamma))
            .cost_weight(time(&self.cost_weight))
            .noise_covariances(self.q.clone(), self.q0.clone());
        let measure = standard_measure(&self.measure)?;
        Ok(build_scenario(&raw, measure, self.grid(steps)?)?)
    }

    /// Gain from an expression, or zero. `Optimal` must be resolved by the
    /// caller.
    pub fn expression_gain(&self, grid: &TimeGrid<f64>) -> Result<Option<GainSchedule<f64>>> {
        match &self.gain {
            GainSpec::Zero => Ok(Some(GainSchedule::zeros(
                *grid,
                self.dims.state,
                self.dims.observation,
            ))),
            GainSpec::Expression(h) => {
                let e = h.0.clone();
                Ok(Some(GainSchedule::from_fn(*grid, move |t: f64| {
                    e.eval(t, &[])
                })?))
            }
            GainSpec::Optimal => Ok(None),
        }
    }

    /// Parses a gain given on the command line.
    pub fn override_gain(&mut self, text: &str) -> Result<()> {
        self.gain = if text.trim() == "optimal" {
            GainSpec::Optimal
        } else if text.trim() == "zero" {
            GainSpec::Zero
        } else {
            let g = ExprMatrix::from_entry(&Entry::Cell(Cell::Text(text.into())), "gain")?;
            g.check("gain", (self.dims.state, self.dims.observation), 0)?;
            GainSpec::Expression(Arc::new(ExprMatrixHandle(g)))
        };
        Ok(())
    }

    /// Scalar, interaction-free scenario with a single starting point: the
    /// coefficient functions for a Kalman–Bucy reference `(A, C, σ₀, γ₀)`.
    #[allow(clippy::type_complexity)]
    pub fn kalman_bucy_reference(&self) -> Option<[Box<dyn Fn(f64) -> f64>; 4]> {
        if !self.dims.is_scalar() {
            return None;
        }
        let point = match &self.measure {
            MeasureKind::Dirac(p) => p.clone(),
            MeasureKind::Discrete { points, .. } if points.len() == 1 => points[0].clone(),
            _ => return None,
        };
        let zero = |e: &ExprMatrix| {
            let e = e.scalar_expr()?;
            let grid = self.grid(None).ok()?;
            grid.nodes()
                .iter()
                .all(|&t| e.eval(t, &[]).ok() == Some(0.0))
                .then_some(())
        };
        zero(&self.b)?;
        zero(&self.d)?;
        let time = |e: &ExprMatrix| -> Option<Box<dyn Fn(f64) -> f64>> {
            let e = e.scalar_expr()?.clone();
            Some(Box::new(move |t| e.eval_or_nan(t, &[])))
        };
        let at_point = |e: &ExprMatrix| -> Option<Box<dyn Fn(f64) -> f64>> {
            let e = e.scalar_expr()?.clone();
            let p = point.clone();
            Some(Box::new(move |t| e.eval_or_nan(t, &p)))
        };
        let q = self.q[(0, 0)].sqrt();
        let q0 = self.q0[(0, 0)].sqrt();
        let sigma = at_point(&self.sigma)?;
        let gamma = at_point(&self.gamma)?;
        Some([
            time(&self.a)?,
            time(&self.c)?,
            Box::new(move |t| sigma(t) * q),
            Box::new(move |t| gamma(t) * q0),
        ])
    }
}
