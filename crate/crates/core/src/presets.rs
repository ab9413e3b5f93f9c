//! Named coefficient presets and the model registry.
//!
//! Arbitrary progressively measurable functionals cannot be written in a
//! config file, so configs pick models from this registry by name. Every
//! shipped preset has Lipschitz (or bounded, uniformly elliptic)
//! coefficients, for which weak uniqueness is classical. The `expr`
//! preset accepts user formulas over `(t, x_t)` unchecked.

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::expr::{ExprDiffusion, ExprDrift};
use crate::linalg::Matrix;
use crate::sde::{DiffusionField, DriftField, PathView, SdeModel};

#[derive(Clone, Debug)]
pub struct ZeroDrift {
    pub dim: usize,
}

impl DriftField for ZeroDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, _p: PathView<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    fn time_only(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        "zero".into()
    }
}

#[derive(Clone, Debug)]
pub struct ConstantDrift(pub Vec<f64>);

impl DriftField for ConstantDrift {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn eval(&self, _t: f64, _p: PathView<'_>, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
    fn time_only(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("constant {:?}", self.0)
    }
}

/// `b(x) = θ (mean − x)`, componentwise.
#[derive(Clone, Debug)]
pub struct OuDrift {
    pub theta: f64,
    pub mean: Vec<f64>,
}

impl DriftField for OuDrift {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn eval(&self, _t: f64, p: PathView<'_>, out: &mut [f64]) {
        for ((o, x), m) in out.iter_mut().zip(p.current()).zip(&self.mean) {
            *o = self.theta * (m - x);
        }
    }
    fn describe(&self) -> String {
        format!("ou theta={} mean={:?}", self.theta, self.mean)
    }
}

/// `b(x) = A x + c`.
#[derive(Clone, Debug)]
pub struct LinearDrift {
    pub a: Matrix,
    pub c: Vec<f64>,
}

impl DriftField for LinearDrift {
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn eval(&self, _t: f64, p: PathView<'_>, out: &mut [f64]) {
        self.a.mul_vec_into(p.current(), out);
        for (o, c) in out.iter_mut().zip(&self.c) {
            *o += c;
        }
    }
    fn describe(&self) -> String {
        format!("linear A={:?} c={:?}", self.a, self.c)
    }
}

#[derive(Clone, Debug)]
pub struct ConstantDiffusion(pub Matrix);

impl DiffusionField for ConstantDiffusion {
    fn dim(&self) -> usize {
        self.0.rows()
    }
    fn eval(&self, _t: f64, _p: PathView<'_>, out: &mut Matrix) {
        out.as_mut_slice().copy_from_slice(self.0.as_slice());
    }
    fn constant(&self) -> Option<Matrix> {
        Some(self.0.clone())
    }
    fn describe(&self) -> String {
        format!("constant {:?}", self.0)
    }
}

/// Diffusion tabulated on the grid: step `k` uses `table[k]`.
#[derive(Clone, Debug)]
pub struct TabulatedDiffusion {
    pub table: Vec<Matrix>,
    pub label: String,
}

impl DiffusionField for TabulatedDiffusion {
    fn dim(&self) -> usize {
        self.table[0].rows()
    }
    fn eval(&self, _t: f64, p: PathView<'_>, out: &mut Matrix) {
        let k = p.step().min(self.table.len() - 1);
        out.as_mut_slice().copy_from_slice(self.table[k].as_slice());
    }
    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// Bounded GBM-like diffusion `σ(x) = scale · diag(1 + x_i² / (1 + x_i²))`.
///
/// Grows like the geometric case near the origin but stays in
/// `[scale, 2·scale]`, so it is Lipschitz and uniformly elliptic.
#[derive(Clone, Debug)]
pub struct BoundedGbmDiffusion {
    pub dim: usize,
    pub scale: f64,
}

impl DiffusionField for BoundedGbmDiffusion {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, p: PathView<'_>, out: &mut Matrix) {
        out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        for (i, x) in p.current().iter().enumerate() {
            let x2 = x * x;
            out[(i, i)] = self.scale * (1.0 + x2 / (1.0 + x2));
        }
    }
    fn describe(&self) -> String {
        format!("gbm-bounded scale={}", self.scale)
    }
}

/// `σ(x) = scale · R(rate · x_1)`: a rotation of the first coordinate
/// plane by an angle read off the current state. `σσᵀ = scale² · Id`.
#[derive(Clone, Debug)]
pub struct StateRotationDiffusion {
    pub dim: usize,
    pub scale: f64,
    pub rate: f64,
}

impl DiffusionField for StateRotationDiffusion {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, p: PathView<'_>, out: &mut Matrix) {
        let r = Matrix::embedded_rotation(self.dim, self.rate * p.current()[0]);
        for (o, v) in out.as_mut_slice().iter_mut().zip(r.as_slice()) {
            *o = self.scale * v;
        }
    }
    fn describe(&self) -> String {
        format!("rotation-by-state scale={} rate={}", self.scale, self.rate)
    }
}

/// Path-dependent `σ(t, ω) = scale · (1 + tanh²(max_{s≤t} ω¹_s)) · Id`.
#[derive(Clone, Debug)]
pub struct RunningMaxDiffusion {
    pub dim: usize,
    pub scale: f64,
}

impl DiffusionField for RunningMaxDiffusion {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, p: PathView<'_>, out: &mut Matrix) {
        let m = (0..p.len())
            .map(|k| p.point(k)[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let v = self.scale * (1.0 + m.tanh().powi(2));
        out.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        for i in 0..self.dim {
            out[(i, i)] = v;
        }
    }
    fn describe(&self) -> String {
        format!("running-max scale={}", self.scale)
    }
}

pub fn brownian(d: usize) -> SdeModel {
    SdeModel::new(
        "bm",
        vec![0.0; d],
        Arc::new(ZeroDrift { dim: d }),
        Arc::new(ConstantDiffusion(Matrix::identity(d))),
    )
    .expect("consistent dimensions")
}

/// Componentwise OU `dX = θ(mean − X)dt + σ dB`, started at `z0`.
pub fn ou(d: usize, theta: f64, mean: f64, sigma: f64, z0: f64) -> SdeModel {
    SdeModel::new(
        format!("ou(theta={theta},mean={mean},sigma={sigma})"),
        vec![z0; d],
        Arc::new(OuDrift {
            theta,
            mean: vec![mean; d],
        }),
        Arc::new(ConstantDiffusion(Matrix::identity(d).scale(sigma))),
    )
    .expect("consistent dimensions")
}

pub fn constant(z0: Vec<f64>, drift: Vec<f64>, sigma: Matrix) -> Result<SdeModel> {
    if !sigma.is_square() {
        return Err(Error::dimension("diffusion must be square"));
    }
    SdeModel::new(
        format!("const(sigma={:?})", sigma),
        z0,
        Arc::new(ConstantDrift(drift)),
        Arc::new(ConstantDiffusion(sigma)),
    )
}

pub fn gbm_bounded(d: usize, mu: f64, scale: f64, z0: f64) -> SdeModel {
    SdeModel::new(
        "gbm-bounded",
        vec![z0; d],
        Arc::new(ConstantDrift(vec![mu; d])),
        Arc::new(BoundedGbmDiffusion { dim: d, scale }),
    )
    .expect("consistent dimensions")
}

pub fn rotation_by_state(d: usize, scale: f64, rate: f64) -> SdeModel {
    SdeModel::new(
        "rotation-by-state",
        vec![0.0; d],
        Arc::new(ZeroDrift { dim: d }),
        Arc::new(StateRotationDiffusion {
            dim: d,
            scale,
            rate,
        }),
    )
    .expect("consistent dimensions")
}

pub fn running_max(d: usize, scale: f64) -> SdeModel {
    SdeModel::new(
        "running-max",
        vec![0.0; d],
        Arc::new(ZeroDrift { dim: d }),
        Arc::new(RunningMaxDiffusion { dim: d, scale }),
    )
    .expect("consistent dimensions")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamInfo {
    pub name: &'static str,
    pub kind: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PresetInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: Vec<ParamInfo>,
}

const fn p(name: &'static str, kind: &'static str, default: &'static str, help: &'static str) -> ParamInfo {
    ParamInfo {
        name,
        kind,
        default,
        help,
    }
}

/// Registry dump: every model preset with its parameter schema.
pub fn list_presets() -> Vec<PresetInfo> {
    let z0 = p("z0", "float | [float; d]", "0", "initial condition");
    vec![
        PresetInfo {
            name: "bm",
            summary: "standard Brownian motion: b = 0, sigma = Id",
            params: vec![z0.clone()],
        },
        PresetInfo {
            name: "ou",
            summary: "Ornstein-Uhlenbeck: b(x) = theta (mean - x), sigma = s Id",
            params: vec![
                p("theta", "float", "1", "mean-reversion speed"),
                p("mean", "float", "0", "long-run mean"),
                p("sigma", "float", "1", "volatility"),
                z0.clone(),
            ],
        },
        PresetInfo {
            name: "gbm-bounded",
            summary: "bounded GBM-like: b = mu, sigma(x) = scale diag(1 + x_i^2/(1 + x_i^2))",
            params: vec![
                p("mu", "float", "0", "constant drift"),
                p("scale", "float", "1", "volatility scale"),
                z0.clone(),
            ],
        },
        PresetInfo {
            name: "const-matrix",
            summary: "constant coefficients: b = drift, sigma = fixed matrix",
            params: vec![
                p("sigma", "[[float; d]; d] | float", "Id", "diffusion matrix (scalar means scalar * Id)"),
                p("drift", "[float; d] | float", "0", "constant drift"),
                z0.clone(),
            ],
        },
        PresetInfo {
            name: "rotation-by-state",
            summary: "b = 0, sigma(x) = scale R(rate x_1) rotating the first coordinate plane",
            params: vec![
                p("scale", "float", "1", "volatility scale"),
                p("rate", "float", "1", "angle per unit of x_1"),
                z0.clone(),
            ],
        },
        PresetInfo {
            name: "running-max",
            summary: "b = 0, path-dependent sigma = scale (1 + tanh^2(running max of x_1)) Id",
            params: vec![p("scale", "float", "1", "volatility scale"), z0.clone()],
        },
        PresetInfo {
            name: "expr",
            summary: "user formulas over t, x1..xd (x when d = 1); accepted unchecked",
            params: vec![
                p("drift", "[string; d]", "\"0\"", "drift components"),
                p(
                    "diffusion",
                    "[string; d] | [[string; d]; d]",
                    "identity",
                    "diagonal entries or full matrix",
                ),
                z0,
            ],
        },
    ]
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl ScalarOrVec {
    fn expand(self, d: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![v; d]),
            ScalarOrVec::Vec(v) if v.len() == d => Ok(v),
            ScalarOrVec::Vec(v) => Err(Error::Invalid(format!(
                "{what} has length {}, expected {d}",
                v.len()
            ))),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScalarOrMatrix {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExprDiffusionSpec {
    Diagonal(Vec<String>),
    Full(Vec<Vec<String>>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BmParams {
    z0: Option<ScalarOrVec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OuParams {
    #[serde(default = "one")]
    theta: f64,
    #[serde(default)]
    mean: f64,
    #[serde(default = "one")]
    sigma: f64,
    z0: Option<ScalarOrVec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GbmParams {
    #[serde(default)]
    mu: f64,
    #[serde(default = "one")]
    scale: f64,
    z0: Option<ScalarOrVec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstParams {
    sigma: Option<ScalarOrMatrix>,
    drift: Option<ScalarOrVec>,
    z0: Option<ScalarOrVec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RotationParams {
    #[serde(default = "one")]
    scale: f64,
    #[serde(default = "one")]
    rate: f64,
    z0: Option<ScalarOrVec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunningMaxParams {
    #[serde(default = "one")]
    scale: f64,
    z0: Option<ScalarOrVec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExprParams {
    drift: Option<Vec<String>>,
    diffusion: Option<ExprDiffusionSpec>,
    z0: Option<ScalarOrVec>,
}

fn one() -> f64 {
    1.0
}

fn parse<T: DeserializeOwned>(preset: &str, params: &Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(params.clone()))
        .map_err(|e| Error::Invalid(format!("preset '{preset}': {e}")))
}

fn initial(z0: Option<ScalarOrVec>, d: usize) -> Result<Vec<f64>> {
    z0.map_or_else(|| Ok(vec![0.0; d]), |z| z.expand(d, "z0"))
}

pub fn preset_exists(name: &str) -> bool {
    list_presets().iter().any(|p| p.name == name)
}

/// Builds the model named `name` in dimension `d` from its parameters.
pub fn build_model(name: &str, d: usize, params: &Map<String, Value>) -> Result<SdeModel> {
    if d == 0 {
        return Err(Error::Invalid("dimension must be at least 1".into()));
    }
    let model = match name {
        "bm" => {
            let q: BmParams = parse(name, params)?;
            let m = brownian(d);
            SdeModel::new("bm", initial(q.z0, d)?, m.drift().clone(), m.diffusion().clone())?
        }
        "ou" => {
            let q: OuParams = parse(name, params)?;
            let m = ou(d, q.theta, q.mean, q.sigma, 0.0);
            SdeModel::new(m.label(), initial(q.z0, d)?, m.drift().clone(), m.diffusion().clone())?
        }
        "gbm-bounded" => {
            let q: GbmParams = parse(name, params)?;
            let m = gbm_bounded(d, q.mu, q.scale, 0.0);
            SdeModel::new(m.label(), initial(q.z0, d)?, m.drift().clone(), m.diffusion().clone())?
        }
        "const-matrix" => {
            let q: ConstParams = parse(name, params)?;
            let sigma = match q.sigma {
                None => Matrix::identity(d),
                Some(ScalarOrMatrix::Scalar(s)) => Matrix::identity(d).scale(s),
                Some(ScalarOrMatrix::Matrix(rows)) => Matrix::from_rows(&rows)?,
            };
            if sigma.rows() != d || sigma.cols() != d {
                return Err(Error::Invalid(format!(
                    "preset 'const-matrix': sigma must be {d}x{d}"
                )));
            }
            let drift = q.drift.map_or_else(|| Ok(vec![0.0; d]), |b| b.expand(d, "drift"))?;
            SdeModel::new(
                "const-matrix",
                initial(q.z0, d)?,
                Arc::new(ConstantDrift(drift)),
                Arc::new(ConstantDiffusion(sigma)),
            )?
        }
        "rotation-by-state" => {
            let q: RotationParams = parse(name, params)?;
            if d < 2 {
                return Err(Error::Invalid("preset 'rotation-by-state' needs d >= 2".into()));
            }
            let m = rotation_by_state(d, q.scale, q.rate);
            SdeModel::new(m.label(), initial(q.z0, d)?, m.drift().clone(), m.diffusion().clone())?
        }
        "running-max" => {
            let q: RunningMaxParams = parse(name, params)?;
            let m = running_max(d, q.scale);
            SdeModel::new(m.label(), initial(q.z0, d)?, m.drift().clone(), m.diffusion().clone())?
        }
        "expr" => {
            let q: ExprParams = parse(name, params)?;
            let drift = q.drift.unwrap_or_else(|| vec!["0".into(); d]);
            let diffusion = match q.diffusion {
                None => (0..d)
                    .map(|i| (0..d).map(|j| if i == j { "1" } else { "0" }.to_string()).collect())
                    .collect(),
                Some(ExprDiffusionSpec::Diagonal(diag)) => {
                    if diag.len() != d {
                        return Err(Error::Invalid(format!(
                            "preset 'expr': diffusion diagonal needs {d} entries"
                        )));
                    }
                    (0..d)
                        .map(|i| {
                            (0..d)
                                .map(|j| if i == j { diag[i].clone() } else { "0".to_string() })
                                .collect()
                        })
                        .collect()
                }
                Some(ExprDiffusionSpec::Full(rows)) => rows,
            };
            SdeModel::new(
                "expr",
                initial(q.z0, d)?,
                Arc::new(ExprDrift::parse(d, &drift)?),
                Arc::new(ExprDiffusion::parse(d, &diffusion)?),
            )?
        }
        other => {
            return Err(Error::Invalid(format!("unknown preset '{other}'")));
        }
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{ito_map, sample_brownian, TimeGrid};
    use serde_json::json;

    fn params(v: Value) -> Map<String, Value> {
        v.as_object().cloned().unwrap()
    }

    #[test]
    fn registry_has_at_least_five_presets_and_each_builds() {
        let all = list_presets();
        assert!(all.len() >= 5);
        for info in &all {
            assert!(preset_exists(info.name));
            build_model(info.name, 2, &Map::new())
                .unwrap_or_else(|e| panic!("{}: {e}", info.name));
        }
    }

    #[test]
    fn unknown_preset_is_named_in_the_error() {
        let err = build_model("heston", 1, &Map::new()).unwrap_err();
        assert!(err.to_string().contains("heston"));
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let err = build_model("ou", 1, &params(json!({"thetta": 2.0}))).unwrap_err();
        assert!(err.to_string().contains("thetta"), "{err}");
    }

    #[test]
    fn const_matrix_parameters() {
        let m = build_model(
            "const-matrix",
            2,
            &params(json!({"sigma": [[2.0, 0.0], [0.0, 1.0]], "drift": 0.5, "z0": [1.0, -1.0]})),
        )
        .unwrap();
        assert_eq!(m.z0(), &[1.0, -1.0]);
        assert_eq!(m.diffusion().constant().unwrap(), Matrix::from_diag(&[2.0, 1.0]));
        let scalar = build_model("const-matrix", 3, &params(json!({"sigma": 2.0}))).unwrap();
        assert_eq!(scalar.diffusion().constant().unwrap(), Matrix::identity(3).scale(2.0));
        assert!(build_model("const-matrix", 3, &params(json!({"sigma": [[1.0]]}))).is_err());
    }

    #[test]
    fn rotation_by_state_is_scaled_orthogonal() {
        let m = rotation_by_state(2, 2.0, 1.0);
        let path = [0.0, 0.0, 0.3, 1.0];
        let mut s = Matrix::zeros(2, 2);
        m.diffusion().eval(0.5, PathView::new(2, &path), &mut s);
        let sst = s.matmul(&s.transpose());
        assert!((&sst - &Matrix::identity(2).scale(4.0)).max_abs() < 1e-14);
        assert!((s[(0, 0)] - 2.0 * 0.3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn expr_preset_matches_ou() {
        let g = TimeGrid::new(64).unwrap();
        let e = build_model(
            "expr",
            1,
            &params(json!({"drift": ["2*(1 - x)"], "diffusion": ["0.5"], "z0": 0.3})),
        )
        .unwrap();
        let o = build_model("ou", 1, &params(json!({"theta": 2.0, "mean": 1.0, "sigma": 0.5, "z0": 0.3})))
            .unwrap();
        let w = sample_brownian(g, 1, 1, 1).unwrap().sample_path(0);
        let (a, b) = (ito_map(&e, &w).unwrap(), ito_map(&o, &w).unwrap());
        assert!(a.max_distance(&b) < 1e-12);
    }
}
