//! Coefficient expressions in `t` and the starting point `u`.

use std::cell::RefCell;

use anyhow::{anyhow, Context as _, Result};
use evalexpr::{
    build_operator_tree, ContextWithMutableFunctions, ContextWithMutableVariables,
    DefaultNumericTypes, EvalexprError, Function, HashMapContext, Node, Value,
};

type Ctx = HashMapContext<DefaultNumericTypes>;

const UNARY: [(&str, fn(f64) -> f64); 12] = [
    ("sin", f64::sin),
    ("cos", f64::cos),
    ("tan", f64::tan),
    ("sinh", f64::sinh),
    ("cosh", f64::cosh),
    ("tanh", f64::tanh),
    ("exp", f64::exp),
    ("ln", f64::ln),
    ("sqrt", f64::sqrt),
    ("abs", f64::abs),
    ("atan", f64::atan),
    ("sign", f64::signum),
];

fn base_context() -> Ctx {
    let mut ctx = Ctx::new();
    for (name, f) in UNARY {
        ctx.set_function(
            name.into(),
            Function::new(move |arg: &Value<DefaultNumericTypes>| {
                Ok(Value::Float(f(arg.as_number()?)))
            }),
        )
        .expect("function table is mutable");
    }
    ctx.set_value("pi".into(), Value::Float(std::f64::consts::PI))
        .expect("mutable");
    ctx
}

thread_local! {
    static CONTEXT: RefCell<Ctx> = RefCell::new(base_context());
}

/// Parsed arithmetic expression. Variables: `t`, `u` (first coordinate of
/// the starting point) and `u0`, `u1`, ...; functions: the usual unary ones
/// plus `pi`. Integer literals divide as integers, so write `1.0/2`.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    tree: Node<DefaultNumericTypes>,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tree = build_operator_tree::<DefaultNumericTypes>(source)
            .with_context(|| format!("cannot parse expression `{source}`"))?;
        Ok(Self {
            source: source.to_string(),
            tree,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self::parse(&format!("{value:?}")).expect("float literal parses")
    }

    /// Evaluates at time `t` and starting point `u`.
    pub fn eval(&self, t: f64, u: &[f64]) -> Result<f64> {
        CONTEXT.with(|cell| {
            let mut ctx = cell.borrow_mut();
            let set = |ctx: &mut Ctx, k: String, v: f64| ctx.set_value(k, Value::Float(v));
            set(&mut ctx, "t".into(), t).map_err(err)?;
            set(&mut ctx, "u".into(), u.first().copied().unwrap_or(0.0)).map_err(err)?;
            for (k, &v) in u.iter().enumerate() {
                set(&mut ctx, format!("u{k}"), v).map_err(err)?;
            }
            self.tree
                .eval_number_with_context(&*ctx)
                .map_err(|e| anyhow!("evaluating `{}`: {e}", self.source))
        })
    }

    /// Evaluates, mapping failures to NaN so the scenario validation reports
    /// the node where it happened.
    pub fn eval_or_nan(&self, t: f64, u: &[f64]) -> f64 {
        self.eval(t, u).unwrap_or(f64::NAN)
    }

    /// Fails if the expression uses anything besides `t`, `u`, `u0..u{dim-1}`
    /// and the built-in functions.
    pub fn check(&self, dim: usize) -> Result<()> {
        for name in self.tree.iter_variable_identifiers() {
            let ok = matches!(name, "t" | "u" | "pi")
                || name
                    .strip_prefix('u')
                    .and_then(|k| k.parse::<usize>().ok())
                    .is_some_and(|k| k < dim);
            if !ok {
                return Err(anyhow!("unknown variable `{name}` in `{}`", self.source));
            }
        }
        self.eval(0.0, &vec![0.0; dim]).map(|_| ())
    }
}

fn err(e: EvalexprError<DefaultNumericTypes>) -> anyhow::Error {
    anyhow!("{e}")
}
