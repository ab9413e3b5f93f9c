//! Coefficients given as user formulas over `t` and the current state.
//!
//! Variables: `t`, `x1`..`xd` (and `x` as an alias of `x1` when `d = 1`).
//! Functions from the `evalexpr` builtins, e.g. `math::sin(x1)`.

use evalexpr::{
    build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node,
    Value,
};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sde::{DiffusionField, DriftField, PathView};

type Tree = Node<DefaultNumericTypes>;

fn compile(src: &str) -> Result<Tree> {
    build_operator_tree::<DefaultNumericTypes>(src)
        .map_err(|e| Error::Invalid(format!("cannot parse expression '{src}': {e}")))
}

fn context(t: f64, x: &[f64]) -> HashMapContext<DefaultNumericTypes> {
    let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
    // Setting fresh variables on a new context cannot fail.
    let _ = ctx.set_value("t".into(), Value::from_float(t));
    for (i, v) in x.iter().enumerate() {
        let _ = ctx.set_value(format!("x{}", i + 1), Value::from_float(*v));
    }
    if x.len() == 1 {
        let _ = ctx.set_value("x".into(), Value::from_float(x[0]));
    }
    ctx
}

fn eval(tree: &Tree, ctx: &HashMapContext<DefaultNumericTypes>) -> f64 {
    // Evaluation errors (unknown variables, type errors) surface as NaN and
    // are caught by the solvers' finiteness check.
    tree.eval_number_with_context(ctx).unwrap_or(f64::NAN)
}

/// Checks every formula once at a reference point so typos fail early.
fn probe(trees: &[Tree], sources: &[String], d: usize) -> Result<()> {
    let ctx = context(0.0, &vec![0.0; d]);
    for (tree, src) in trees.iter().zip(sources) {
        tree.eval_number_with_context(&ctx)
            .map_err(|e| Error::Invalid(format!("cannot evaluate '{src}': {e}")))?;
    }
    Ok(())
}

pub struct ExprDrift {
    sources: Vec<String>,
    trees: Vec<Tree>,
}

impl ExprDrift {
    pub fn parse(d: usize, sources: &[String]) -> Result<Self> {
        if sources.len() != d {
            return Err(Error::Invalid(format!(
                "drift needs {d} expressions, got {}",
                sources.len()
            )));
        }
        let trees = sources.iter().map(|s| compile(s)).collect::<Result<Vec<_>>>()?;
        probe(&trees, sources, d)?;
        Ok(Self {
            sources: sources.to_vec(),
            trees,
        })
    }
}

impl DriftField for ExprDrift {
    fn dim(&self) -> usize {
        self.trees.len()
    }
    fn eval(&self, t: f64, p: PathView<'_>, out: &mut [f64]) {
        let ctx = context(t, p.current());
        for (o, tree) in out.iter_mut().zip(&self.trees) {
            *o = eval(tree, &ctx);
        }
    }
    fn describe(&self) -> String {
        format!("expr drift {:?}", self.sources)
    }
}

pub struct ExprDiffusion {
    dim: usize,
    sources: Vec<String>,
    trees: Vec<Tree>,
}

impl ExprDiffusion {
    pub fn parse(d: usize, rows: &[Vec<String>]) -> Result<Self> {
        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid(format!("diffusion needs a {d}x{d} expression matrix")));
        }
        let sources: Vec<String> = rows.iter().flatten().cloned().collect();
        let trees = sources.iter().map(|s| compile(s)).collect::<Result<Vec<_>>>()?;
        probe(&trees, &sources, d)?;
        Ok(Self {
            dim: d,
            sources,
            trees,
        })
    }
}

impl DiffusionField for ExprDiffusion {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, p: PathView<'_>, out: &mut Matrix) {
        let ctx = context(t, p.current());
        for (o, tree) in out.as_mut_slice().iter_mut().zip(&self.trees) {
            *o = eval(tree, &ctx);
        }
    }
    fn describe(&self) -> String {
        format!("expr diffusion {:?}", self.sources)
    }
}
