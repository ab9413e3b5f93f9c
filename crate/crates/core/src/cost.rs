//! Path costs, Monte Carlo estimates of `E^π[c]`, and explicit optimal
//! values for separable costs.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::coupling::{self, CoupledEnsemble, RotationProcess};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, DEFAULT_RANK_TOL};
use crate::presets::TabulatedDiffusion;
use crate::sde::{DiffusionField, PathEnsemble, PathView, SamplePath, SdeModel, Stepper, TimeGrid};

/// Tolerance for "σ̄σ̄ᵀ is deterministic" on probes, relative to its scale.
pub const DETERMINISM_TOL: f64 = 1e-8;

/// Number of probe paths used to validate determinism of `σ̄σ̄ᵀ`.
const DETERMINISM_PROBES: usize = 64;

type PathFn = Arc<dyn Fn(PathView<'_>) -> f64 + Send + Sync>;
type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A user-supplied function with a printable name.
pub struct Custom<F: ?Sized> {
    pub label: String,
    pub f: Arc<F>,
}

impl<F: ?Sized> Clone for Custom<F> {
    fn clone(&self) -> Self {
        Self {
            label: self.label.clone(),
            f: self.f.clone(),
        }
    }
}

impl<F: ?Sized> fmt::Debug for Custom<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "custom({})", self.label)
    }
}

impl<F: ?Sized> Serialize for Custom<F> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("custom:{}", self.label))
    }
}

/// `h`, applied to the finite-variation difference `V^η − V^ν`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HSpec {
    Zero,
    /// `max_k ‖v_k‖`
    SupNorm,
    /// `Σ_k ‖v_{k+1} − v_k‖`
    Variation,
    /// `‖v_n‖`
    Terminal,
    #[serde(skip_deserializing)]
    Custom(Custom<dyn Fn(PathView<'_>) -> f64 + Send + Sync>),
}

impl HSpec {
    pub fn custom(label: impl Into<String>, f: impl Fn(PathView<'_>) -> f64 + Send + Sync + 'static) -> Self {
        let f: PathFn = Arc::new(f);
        HSpec::Custom(Custom { label: label.into(), f })
    }

    pub fn apply(&self, v: PathView<'_>) -> f64 {
        let norm = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n = v.len() - 1;
        match self {
            HSpec::Zero => 0.0,
            HSpec::SupNorm => (0..=n).map(|k| norm(v.point(k))).fold(0.0, f64::max),
            HSpec::Variation => (0..n)
                .map(|k| {
                    let (a, b) = (v.point(k), v.point(k + 1));
                    a.iter().zip(b).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt()
                })
                .sum(),
            HSpec::Terminal => norm(v.point(n)),
            HSpec::Custom(c) => (c.f)(v),
        }
    }
}

/// Monotone `g`, applied to `Tr⟨M^η − M^ν⟩₁`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GSpec {
    Identity,
    Square,
    Sqrt,
    /// `x^p`, `p > 0`
    Power(f64),
    #[serde(skip_deserializing)]
    Custom(Custom<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl GSpec {
    pub fn custom(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        let f: RealFn = Arc::new(f);
        GSpec::Custom(Custom { label: label.into(), f })
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            GSpec::Identity => x,
            GSpec::Square => x * x,
            GSpec::Sqrt => x.sqrt(),
            GSpec::Power(p) => x.powf(*p),
            GSpec::Custom(c) => (c.f)(x),
        }
    }

    /// Spot-checks monotonicity and nonnegativity on 100 points in
    /// `{0} ∪ [1e-3, 1e3]` (log-spaced).
    pub fn validate(&self) -> Result<()> {
        if let GSpec::Power(p) = self {
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::Invalid(format!("g power must be positive, got {p}")));
            }
        }
        let probes = std::iter::once(0.0).chain((0..99).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 98.0)));
        let mut prev = f64::NEG_INFINITY;
        for x in probes {
            let v = self.apply(x);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("g({x}) = {v} is not a nonnegative real")));
            }
            if v < prev {
                return Err(Error::Invalid(format!("g is not nondecreasing near {x}")));
            }
            prev = v;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    /// `h(V^η − V^ν) + g(Tr⟨M^η − M^ν⟩₁)`
    Separable { h: HSpec, g: GSpec },
    /// `∫₀¹ ‖x_s − y_s‖^p ds`
    LpPath { p: f64 },
}

impl CostSpec {
    pub fn separable(h: HSpec, g: GSpec) -> Result<Self> {
        let spec = CostSpec::Separable { h, g };
        spec.validate()?;
        Ok(spec)
    }

    pub fn lp(p: f64) -> Result<Self> {
        let spec = CostSpec::LpPath { p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CostSpec::Separable { g, .. } => g.validate(),
            CostSpec::LpPath { p } if !(p.is_finite() && *p >= 1.0) => {
                Err(Error::Invalid(format!("L^p cost needs p >= 1, got {p}")))
            }
            CostSpec::LpPath { .. } => Ok(()),
        }
    }
}

fn check_pair(x: PathView<'_>, y: PathView<'_>, d: usize) -> Result<()> {
    if x.dim() != d || y.dim() != d {
        return Err(Error::dimension(format!(
            "pair dimensions ({}, {}) do not match model dimension {d}",
            x.dim(),
            y.dim()
        )));
    }
    if x.len() != y.len() {
        return Err(Error::dimension("paths of a pair have different lengths"));
    }
    Ok(())
}

fn nonnegative(v: f64, what: &str) -> Result<f64> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::domain(format!("{what} evaluated to {v}; costs must be nonnegative")));
    }
    Ok(v)
}

fn separable_view(
    x: PathView<'_>,
    y: PathView<'_>,
    grid: TimeGrid,
    src: &SdeModel,
    dst: &SdeModel,
    h: &HSpec,
    g: &GSpec,
) -> Result<f64> {
    let d = src.dim();
    check_pair(x, y, d)?;
    check_pair(x, y, dst.dim())?;
    let dt = grid.dt();
    let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
    let mut v = vec![0.0; x.values().len()];
    for j in 0..d {
        v[j] = src.z0()[j] - dst.z0()[j];
    }
    let mut bracket = 0.0;
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        src.drift().eval(t, x.prefix(k), &mut bx);
        dst.drift().eval(t, y.prefix(k), &mut by);
        for j in 0..d {
            v[(k + 1) * d + j] = v[k * d + j] + (bx[j] - by[j]) * dt;
            let dmx = x.point(k + 1)[j] - x.point(k)[j] - bx[j] * dt;
            let dmy = y.point(k + 1)[j] - y.point(k)[j] - by[j] * dt;
            bracket += (dmx - dmy).powi(2);
        }
    }
    let hv = nonnegative(h.apply(PathView::new(d, &v)), "h")?;
    let gv = nonnegative(g.apply(bracket), "g")?;
    Ok(hv + gv)
}

/// Separable cost of one pair, with the bracket replaced by the realized
/// quadratic variation `Σ_k ‖ΔM^η_k − ΔM^ν_k‖²`.
pub fn eval_separable(
    x: &SamplePath,
    y: &SamplePath,
    src: &SdeModel,
    dst: &SdeModel,
    spec: &CostSpec,
) -> Result<f64> {
    let CostSpec::Separable { h, g } = spec else {
        return Err(Error::Invalid("eval_separable needs a separable cost".into()));
    };
    if x.grid() != y.grid() {
        return Err(Error::dimension("paths of a pair live on different grids"));
    }
    separable_view(x.view(), y.view(), x.grid(), src, dst, h, g)
}

fn lp_view(x: PathView<'_>, y: PathView<'_>, dt: f64, p: f64) -> f64 {
    let d = x.dim();
    (0..x.len() - 1)
        .map(|k| {
            let sq: f64 = (0..d).map(|j| (x.point(k)[j] - y.point(k)[j]).powi(2)).sum();
            sq.powf(p / 2.0)
        })
        .sum::<f64>()
        * dt
}

/// Left Riemann sum `Σ_k ‖x_k − y_k‖^p Δt`.
pub fn eval_lp(x: &SamplePath, y: &SamplePath, p: f64) -> Result<f64> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::Invalid(format!("L^p cost needs p >= 1, got {p}")));
    }
    if x.grid() != y.grid() || x.dim() != y.dim() {
        return Err(Error::dimension("paths of a pair do not match"));
    }
    Ok(lp_view(x.view(), y.view(), x.grid().dt(), p))
}

#[derive(Clone, Debug, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    /// Sample standard deviation over `√N`; 0 when `N = 1`.
    pub stderr: f64,
    #[serde(rename = "N")]
    pub n: usize,
    /// Set when `N = 1` and the standard error is undefined.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub stderr_undefined: bool,
}

impl CostEstimate {
    /// Mean and standard error in index order, for bit-stable results.
    pub fn from_samples(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Invalid("no samples to estimate from".into()));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if v.len() == 1 {
            return Ok(Self {
                mean,
                stderr: 0.0,
                n: 1,
                stderr_undefined: true,
            });
        }
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            stderr: (var / n).sqrt(),
            n: v.len(),
            stderr_undefined: false,
        })
    }

    pub fn combined_stderr(&self, other: &CostEstimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }
}

/// Per-pair costs of `ensemble`, in pair order.
pub fn pair_costs(ensemble: &CoupledEnsemble, spec: &CostSpec, src: &SdeModel, dst: &SdeModel) -> Result<Vec<f64>> {
    spec.validate()?;
    let grid = ensemble.grid();
    let costs: Vec<Result<f64>> = (0..ensemble.n_pairs())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (ensemble.x_path(i), ensemble.y_path(i));
            match spec {
                CostSpec::Separable { h, g } => separable_view(x, y, grid, src, dst, h, g),
                CostSpec::LpPath { p } => Ok(lp_view(x, y, grid.dt(), *p)),
            }
        })
        .collect();
    costs.into_iter().collect()
}

/// Monte Carlo estimate of `E^π[c]` over the pairs of `ensemble`.
pub fn estimate(ensemble: &CoupledEnsemble, spec: &CostSpec, src: &SdeModel, dst: &SdeModel) -> Result<CostEstimate> {
    CostEstimate::from_samples(&pair_costs(ensemble, spec, src, dst)?)
}

/// The optimal rotation `Q*_k(ω) = argmax_Q Tr(σ(k,ω)ᵀ ξ_k Q)`, with
/// `ξ_k = √(σ̄σ̄ᵀ)(k)` tabulated on the grid.
pub struct OptimalRotation {
    sigma: Arc<dyn DiffusionField>,
    xi: Vec<Matrix>,
    fixed: Option<Matrix>,
}

impl OptimalRotation {
    fn at(sigma: &Matrix, xi: &Matrix) -> Result<(Matrix, f64)> {
        linalg::trace_max_rotation(&sigma.transpose().matmul(xi))
    }

    pub fn xi(&self) -> &[Matrix] {
        &self.xi
    }
}

impl RotationProcess for OptimalRotation {
    fn dim(&self) -> usize {
        self.sigma.dim()
    }
    fn eval(&self, t: f64, x: PathView<'_>) -> Matrix {
        if let Some(q) = &self.fixed {
            return q.clone();
        }
        let d = self.dim();
        let mut s = Matrix::zeros(d, d);
        self.sigma.eval(t, x, &mut s);
        let k = x.step().min(self.xi.len() - 1);
        // A failed SVD yields a non-orthogonal matrix, which the coupling
        // constructors reject with the step index.
        Self::at(&s, &self.xi[k]).map(|r| r.0).unwrap_or_else(|_| Matrix::zeros(d, d))
    }
    fn constant(&self) -> Option<Matrix> {
        self.fixed.clone()
    }
    fn describe(&self) -> String {
        "optimal".into()
    }
}

pub struct ClosedForm {
    pub value: CostEstimate,
    pub rotation: Arc<OptimalRotation>,
    /// `dst` with its diffusion replaced by `ξ`; same law as `dst`.
    pub dst_sqrt: SdeModel,
}

fn frob2(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum()
}

/// Explicit optimal value of a separable cost between `src` (invertible
/// `σ`) and `dst` (drift depending on `t` only, `σ̄σ̄ᵀ` deterministic),
/// averaged over `probe` paths drawn from `src`, together with the
/// optimal rotation.
pub fn closed_form_optimal(src: &SdeModel, dst: &SdeModel, spec: &CostSpec, probe: &PathEnsemble) -> Result<ClosedForm> {
    let CostSpec::Separable { h, g } = spec else {
        return Err(Error::Invalid("closed_form_optimal needs a separable cost".into()));
    };
    spec.validate()?;
    let d = src.dim();
    if dst.dim() != d || probe.dim() != d {
        return Err(Error::dimension("closed form: models and probes must share d"));
    }
    if !dst.drift().time_only() {
        return Err(Error::domain(format!(
            "target drift '{}' must depend on time only",
            dst.drift().describe()
        )));
    }
    let grid = probe.grid();
    let n = grid.n_steps();
    let dt = grid.dt();

    let mut abar = Vec::with_capacity(n);
    let mut sb = Matrix::zeros(d, d);
    let first = probe.path(0);
    for k in 0..n {
        dst.diffusion().eval(grid.time(k), first.prefix(k), &mut sb);
        abar.push(sb.matmul(&sb.transpose()));
    }
    for (i, p) in probe.paths().enumerate().take(DETERMINISM_PROBES).skip(1) {
        for (k, a) in abar.iter().enumerate() {
            dst.diffusion().eval(grid.time(k), p.prefix(k), &mut sb);
            let dev = (&sb.matmul(&sb.transpose()) - a).max_abs();
            if dev > DETERMINISM_TOL * a.max_abs().max(1.0) {
                return Err(Error::domain_at(
                    k,
                    format!("target σ̄σ̄ᵀ is not deterministic (probe path {i} deviates by {dev:.3e})"),
                ));
            }
        }
    }
    let xi = abar.iter().map(linalg::psd_sqrt).collect::<Result<Vec<_>>>()?;
    let xi_sq: Vec<f64> = abar.iter().map(Matrix::trace).collect();

    let fixed_sigma = src.diffusion().constant();
    let fixed = match &fixed_sigma {
        Some(s) if xi.iter().all(|m| m == &xi[0]) => Some(OptimalRotation::at(s, &xi[0])?),
        _ => None,
    };
    if let Some(s) = &fixed_sigma {
        linalg::inverse(s, DEFAULT_RANK_TOL)?;
    }

    let samples: Vec<Result<f64>> = (0..probe.n_paths())
        .into_par_iter()
        .map(|i| {
            let x = probe.path(i);
            let mut st = Stepper::new(d);
            let mut bbar = vec![0.0; d];
            let mut v = vec![0.0; x.values().len()];
            for j in 0..d {
                v[j] = src.z0()[j] - dst.z0()[j];
            }
            let mut bracket = 0.0;
            for k in 0..n {
                let t = grid.time(k);
                st.eval(src, t, x.prefix(k));
                dst.drift().eval(t, x.prefix(k), &mut bbar);
                for j in 0..d {
                    v[(k + 1) * d + j] = v[k * d + j] + (st.drift[j] - bbar[j]) * dt;
                }
                let traced = match &fixed {
                    Some((_, s)) => *s,
                    None => {
                        if fixed_sigma.is_none() {
                            linalg::inverse(&st.sigma, DEFAULT_RANK_TOL).map_err(|e| e.at_step(k))?;
                        }
                        OptimalRotation::at(&st.sigma, &xi[k])?.1
                    }
                };
                bracket += (frob2(&st.sigma) + xi_sq[k] - 2.0 * traced) * dt;
            }
            // The bracket is a sum of squares; rounding can push exact zeros
            // slightly negative.
            let hv = nonnegative(h.apply(PathView::new(d, &v)), "h")?;
            let gv = nonnegative(g.apply(bracket.max(0.0)), "g")?;
            Ok(hv + gv)
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;

    let dst_sqrt = dst.with_diffusion(Arc::new(TabulatedDiffusion {
        table: xi.clone(),
        label: format!("sqrt({})", dst.diffusion().describe()),
    }))?;
    Ok(ClosedForm {
        value: CostEstimate::from_samples(&samples)?,
        rotation: Arc::new(OptimalRotation {
            sigma: src.diffusion().clone(),
            xi,
            fixed: fixed.map(|f| f.0),
        }),
        dst_sqrt,
    })
}

/// The optimal bicausal Monge coupling: the recursion of
/// [`coupling::monge_sde`] towards `√(σ̄σ̄ᵀ)` along `Q*`.
pub fn optimal_monge_coupling(
    src: &SdeModel,
    closed: &ClosedForm,
    grid: TimeGrid,
    n: usize,
    seed: u64,
) -> Result<CoupledEnsemble> {
    if closed.rotation.xi.len() != grid.n_steps() {
        return Err(Error::dimension("closed form was tabulated on a different grid"));
    }
    coupling::monge_sde(&closed.dst_sqrt, closed.rotation.as_ref(), src, grid, n, seed)
}

#[derive(Clone, Debug, Serialize)]
pub struct GapEntry {
    pub constructor: String,
    pub estimate: CostEstimate,
    pub gap: f64,
    pub combined_stderr: f64,
    /// Estimate below the closed form by more than 3 combined stderr.
    pub below_closed_form: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GapReport {
    pub closed_form: CostEstimate,
    pub entries: Vec<GapEntry>,
    pub any_below: bool,
}

/// Estimates each candidate and compares against `closed_form`.
///
/// Every candidate's provenance must name `src` and `dst` as its marginals.
pub fn optimality_gap(
    candidates: &[CoupledEnsemble],
    spec: &CostSpec,
    src: &SdeModel,
    dst: &SdeModel,
    closed_form: &CostEstimate,
) -> Result<GapReport> {
    let mut entries = Vec::with_capacity(candidates.len());
    for c in candidates {
        let p = c.provenance();
        if !p.couples(src, dst) {
            return Err(Error::Invalid(format!(
                "candidate '{}' couples {:?} and {:?}, not '{}' and '{}'",
                p.constructor,
                p.src,
                p.dst,
                src.label(),
                dst.label()
            )));
        }
        let est = estimate(c, spec, src, dst)?;
        let combined = est.combined_stderr(closed_form);
        let gap = est.mean - closed_form.mean;
        entries.push(GapEntry {
            constructor: p.constructor.clone(),
            below_closed_form: gap < -3.0 * combined,
            estimate: est,
            gap,
            combined_stderr: combined,
        });
    }
    Ok(GapReport {
        closed_form: closed_form.clone(),
        any_below: entries.iter().any(|e| e.below_closed_form),
        entries,
    })
}

/// JSON cost report.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub cost_spec: CostSpec,
    #[serde(rename = "N")]
    pub n: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub mean: f64,
    pub stderr: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub stderr_undefined: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_form: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
}

impl CostReport {
    pub fn new(spec: &CostSpec, ensemble: &CoupledEnsemble, est: &CostEstimate, closed_form: Option<f64>) -> Self {
        Self {
            cost_spec: spec.clone(),
            n: est.n,
            n_steps: ensemble.grid().n_steps(),
            seed: ensemble.seed(),
            mean: est.mean,
            stderr: est.stderr,
            stderr_undefined: est.stderr_undefined,
            closed_form,
            gap: closed_form.map(|c| est.mean - c),
        }
    }
}
