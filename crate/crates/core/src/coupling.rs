//! Bicausal couplings between path laws.
//!
//! Every constructor returns a [`CoupledEnsemble`]: `N` pairs of paths on
//! one grid, generated in parallel from per-pair substreams. Correlation
//! and rotation processes are evaluated at left endpoints and checked
//! against `C^d` / `O^d` at every step.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, DEFAULT_RANK_TOL};
use crate::rng::derive_seed;
use crate::sde::{
    self, check_finite, ito_map_into, inverse_ito_map_into, max_abs_diff, PathEnsemble,
    PathView, SdeModel, Stepper, TimeGrid,
};

/// Membership tolerance for `C^d` and `O^d`.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

/// Kernel residuals above this count as a violated kernel condition.
pub const KERNEL_RESIDUAL_TOL: f64 = 1e-8;

/// Model label of Wiener measure, as used by `presets::brownian`.
pub const WIENER_LABEL: &str = "bm";

/// Salt for the auxiliary noise `W` that is independent of the driver.
const AUX_SALT: u64 = 0x5781_7b11;

/// Matrix-valued `ρ(t, X, Ỹ)` in `C^d`.
///
/// `x` and `y` end at the current step; implementations must be pure.
pub trait CorrelationProcess: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: PathView<'_>, y: PathView<'_>) -> Matrix;
    fn constant(&self) -> Option<Matrix> {
        None
    }
    fn describe(&self) -> String;
}

/// Matrix-valued `Q(t, X)` in `O^d`.
pub trait RotationProcess: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: PathView<'_>) -> Matrix;
    fn constant(&self) -> Option<Matrix> {
        None
    }
    fn describe(&self) -> String;
}

#[derive(Clone, Debug)]
pub struct ConstantCorrelation(pub Matrix);

impl ConstantCorrelation {
    /// `r · Id`.
    pub fn scalar(d: usize, r: f64) -> Self {
        Self(Matrix::identity(d).scale(r))
    }
}

impl CorrelationProcess for ConstantCorrelation {
    fn dim(&self) -> usize {
        self.0.rows()
    }
    fn eval(&self, _t: f64, _x: PathView<'_>, _y: PathView<'_>) -> Matrix {
        self.0.clone()
    }
    fn constant(&self) -> Option<Matrix> {
        Some(self.0.clone())
    }
    fn describe(&self) -> String {
        format!("constant {:?}", self.0)
    }
}

pub struct FnCorrelation<F> {
    dim: usize,
    label: String,
    f: F,
}

impl<F> FnCorrelation<F>
where
    F: Fn(f64, PathView<'_>, PathView<'_>) -> Matrix + Send + Sync,
{
    pub fn new(dim: usize, label: impl Into<String>, f: F) -> Self {
        Self {
            dim,
            label: label.into(),
            f,
        }
    }
}

impl<F> CorrelationProcess for FnCorrelation<F>
where
    F: Fn(f64, PathView<'_>, PathView<'_>) -> Matrix + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: PathView<'_>, y: PathView<'_>) -> Matrix {
        (self.f)(t, x, y)
    }
    fn describe(&self) -> String {
        self.label.clone()
    }
}

#[derive(Clone, Debug)]
pub struct ConstantRotation(pub Matrix);

impl ConstantRotation {
    pub fn identity(d: usize) -> Self {
        Self(Matrix::identity(d))
    }

    pub fn reflection(d: usize) -> Self {
        Self(Matrix::identity(d).scale(-1.0))
    }
}

impl RotationProcess for ConstantRotation {
    fn dim(&self) -> usize {
        self.0.rows()
    }
    fn eval(&self, _t: f64, _x: PathView<'_>) -> Matrix {
        self.0.clone()
    }
    fn constant(&self) -> Option<Matrix> {
        Some(self.0.clone())
    }
    fn describe(&self) -> String {
        format!("constant {:?}", self.0)
    }
}

/// Rotation of the first two coordinates by `rate · X¹_t`.
#[derive(Clone, Debug)]
pub struct StateAngleRotation {
    pub dim: usize,
    pub rate: f64,
}

impl RotationProcess for StateAngleRotation {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, x: PathView<'_>) -> Matrix {
        Matrix::embedded_rotation(self.dim, self.rate * x.current()[0])
    }
    fn describe(&self) -> String {
        format!("rotation by {} * x1", self.rate)
    }
}

/// `+Id` on the first `on` steps of every block of `block` steps, `−Id`
/// on the rest.
#[derive(Clone, Debug)]
pub struct ChopRotation {
    pub dim: usize,
    pub block: usize,
    pub on: usize,
}

impl RotationProcess for ChopRotation {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, x: PathView<'_>) -> Matrix {
        let sign = if x.step() % self.block < self.on { 1.0 } else { -1.0 };
        Matrix::identity(self.dim).scale(sign)
    }
    fn describe(&self) -> String {
        format!("chop {}/{}", self.on, self.block)
    }
}

pub struct FnRotation<F> {
    dim: usize,
    label: String,
    f: F,
}

impl<F> FnRotation<F>
where
    F: Fn(f64, PathView<'_>) -> Matrix + Send + Sync,
{
    pub fn new(dim: usize, label: impl Into<String>, f: F) -> Self {
        Self {
            dim,
            label: label.into(),
            f,
        }
    }
}

impl<F> RotationProcess for FnRotation<F>
where
    F: Fn(f64, PathView<'_>) -> Matrix + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: PathView<'_>) -> Matrix {
        (self.f)(t, x)
    }
    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// Which constructor produced an ensemble, and with what.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub constructor: String,
    pub params: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dst: Option<String>,
}

impl Provenance {
    pub fn new(constructor: impl Into<String>, params: Value) -> Self {
        Self {
            constructor: constructor.into(),
            params,
            src: None,
            dst: None,
        }
    }

    fn models(mut self, src: &SdeModel, dst: &SdeModel) -> Self {
        self.src = Some(src.label().to_string());
        self.dst = Some(dst.label().to_string());
        self
    }

    /// Both marginals are Wiener measure (the `bm` preset).
    fn wiener(mut self) -> Self {
        self.src = Some(WIENER_LABEL.into());
        self.dst = Some(WIENER_LABEL.into());
        self
    }

    /// True if the ensemble claims to couple the laws of `src` and `dst`.
    pub fn couples(&self, src: &SdeModel, dst: &SdeModel) -> bool {
        self.src.as_deref() == Some(src.label()) && self.dst.as_deref() == Some(dst.label())
    }
}

/// `N` pairs `(X, Y)` on a common grid.
#[derive(Clone, Debug)]
pub struct CoupledEnsemble {
    grid: TimeGrid,
    dim: usize,
    n_pairs: usize,
    seed: u64,
    x: Vec<f64>,
    y: Vec<f64>,
    provenance: Provenance,
    diagnostics: BTreeMap<String, Value>,
}

impl CoupledEnsemble {
    pub fn from_values(
        grid: TimeGrid,
        dim: usize,
        n_pairs: usize,
        seed: u64,
        x: Vec<f64>,
        y: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 || n_pairs == 0 {
            return Err(Error::Invalid("coupled ensemble needs d >= 1 and N >= 1".into()));
        }
        let len = n_pairs * grid.n_points() * dim;
        if x.len() != len || y.len() != len {
            return Err(Error::dimension("coupled ensemble buffers have wrong length"));
        }
        Ok(Self {
            grid,
            dim,
            n_pairs,
            seed,
            x,
            y,
            provenance,
            diagnostics: BTreeMap::new(),
        })
    }

    /// Pairs the `i`-th paths of two ensembles on the same grid.
    pub fn from_marginals(x: &PathEnsemble, y: &PathEnsemble, provenance: Provenance) -> Result<Self> {
        if x.grid() != y.grid() || x.dim() != y.dim() || x.n_paths() != y.n_paths() {
            return Err(Error::dimension("marginal ensembles do not match"));
        }
        Self::from_values(
            x.grid(),
            x.dim(),
            x.n_paths(),
            x.seed(),
            x.values().to_vec(),
            y.values().to_vec(),
            provenance,
        )
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn x_values(&self) -> &[f64] {
        &self.x
    }

    pub fn y_values(&self) -> &[f64] {
        &self.y
    }

    fn stride(&self) -> usize {
        self.grid.n_points() * self.dim
    }

    pub fn x_path(&self, i: usize) -> PathView<'_> {
        let s = self.stride();
        PathView::new(self.dim, &self.x[i * s..(i + 1) * s])
    }

    pub fn y_path(&self, i: usize) -> PathView<'_> {
        let s = self.stride();
        PathView::new(self.dim, &self.y[i * s..(i + 1) * s])
    }

    pub fn pairs(&self) -> impl ExactSizeIterator<Item = (PathView<'_>, PathView<'_>)> + '_ {
        (0..self.n_pairs).map(move |i| (self.x_path(i), self.y_path(i)))
    }

    pub fn x_ensemble(&self) -> PathEnsemble {
        PathEnsemble::from_values(self.grid, self.dim, self.n_pairs, self.seed, self.x.clone())
            .expect("validated at construction")
    }

    pub fn y_ensemble(&self) -> PathEnsemble {
        PathEnsemble::from_values(self.grid, self.dim, self.n_pairs, self.seed, self.y.clone())
            .expect("validated at construction")
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn diagnostics(&self) -> &BTreeMap<String, Value> {
        &self.diagnostics
    }

    pub fn diagnostic(&self, key: &str) -> Option<&Value> {
        self.diagnostics.get(key)
    }

    pub fn set_diagnostic(&mut self, key: impl Into<String>, value: Value) {
        self.diagnostics.insert(key.into(), value);
    }

    /// `max_{i,k} |X^i_k − Y^i_k|`.
    pub fn max_pair_distance(&self) -> f64 {
        max_abs_diff(&self.x, &self.y)
    }
}

/// Runs `f(i, x_i, y_i)` over all pairs in parallel; the error of the
/// lowest failing pair index wins.
fn generate<T, F>(grid: TimeGrid, d: usize, n: usize, f: F) -> Result<(Vec<f64>, Vec<f64>, Vec<T>)>
where
    T: Send,
    F: Fn(usize, &mut [f64], &mut [f64]) -> Result<T> + Sync,
{
    let stride = grid.n_points() * d;
    let mut x = vec![0.0; n * stride];
    let mut y = vec![0.0; n * stride];
    let results: Vec<Result<T>> = x
        .par_chunks_mut(stride)
        .zip(y.par_chunks_mut(stride))
        .enumerate()
        .map(|(i, (xp, yp))| f(i, xp, yp))
        .collect();
    let extra = results.into_iter().collect::<Result<Vec<T>>>()?;
    Ok((x, y, extra))
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dimension(format!("{what} has dimension {got}, expected {want}")));
    }
    Ok(())
}

fn checked_correlation(rho: Matrix, d: usize, k: usize) -> Result<Matrix> {
    if rho.rows() != d || rho.cols() != d {
        return Err(Error::dimension(format!(
            "correlation is {}x{} at step {k}, expected {d}x{d}",
            rho.rows(),
            rho.cols()
        )));
    }
    if !linalg::is_correlation(&rho, MEMBERSHIP_TOL)? {
        let margin = linalg::correlation_margin(&rho).unwrap_or(f64::NAN);
        return Err(Error::domain_at(
            k,
            format!("correlation process left C^{d} (margin {margin:.3e})"),
        ));
    }
    Ok(rho)
}

fn checked_rotation(q: Matrix, d: usize, k: usize) -> Result<Matrix> {
    if q.rows() != d || q.cols() != d {
        return Err(Error::dimension(format!(
            "rotation is {}x{} at step {k}, expected {d}x{d}",
            q.rows(),
            q.cols()
        )));
    }
    if !linalg::is_orthogonal(&q, MEMBERSHIP_TOL)? {
        return Err(Error::domain_at(k, format!("rotation process left O^{d}")));
    }
    Ok(q)
}

/// `√(Id − ρᵀρ)` for `ρ` already known to lie in `C^d` up to tolerance.
fn complement_sqrt(rho: &Matrix) -> Result<Matrix> {
    let d = rho.rows();
    let c = &Matrix::identity(d) - &rho.transpose().matmul(rho);
    if c.max_abs() == 0.0 {
        return Ok(Matrix::zeros(d, d));
    }
    let sym = (&c + &c.transpose()).scale(0.5);
    let (vals, vecs) = linalg::sym_eigen(&sym)?;
    let mut scaled = vecs.clone();
    for j in 0..d {
        // Eigenvalues down to −O(tol) are admitted by the membership check.
        let r = vals[j].max(0.0).sqrt();
        for i in 0..d {
            scaled[(i, j)] *= r;
        }
    }
    Ok(scaled.matmul(&vecs.transpose()))
}

/// Simulates `(B, B̃)` with `ΔB̃ = ρᵀΔB + √(Id − ρᵀρ)ΔW`.
///
/// `B` equals `sample_brownian(grid, d, N, seed)`; `W` is an independent
/// ensemble on a derived seed.
pub fn couple_brownians(
    rho: &dyn CorrelationProcess,
    grid: TimeGrid,
    d: usize,
    n: usize,
    seed: u64,
) -> Result<CoupledEnsemble> {
    let b = sde::sample_brownian(grid, d, n, seed)?;
    let w = sde::sample_brownian(grid, d, n, derive_seed(seed, AUX_SALT))?;
    couple_brownians_with(rho, &b, &w)
}

/// [`couple_brownians`] with explicit driver `B` and auxiliary noise `W`.
pub fn couple_brownians_with(
    rho: &dyn CorrelationProcess,
    b: &PathEnsemble,
    w: &PathEnsemble,
) -> Result<CoupledEnsemble> {
    let d = b.dim();
    check_dim("correlation process", rho.dim(), d)?;
    if w.grid() != b.grid() || w.dim() != d || w.n_paths() != b.n_paths() {
        return Err(Error::dimension("auxiliary noise does not match the driver ensemble"));
    }
    let grid = b.grid();
    let fixed = match rho.constant() {
        Some(c) => {
            let c = checked_correlation(c, d, 0)?;
            Some((c.transpose(), complement_sqrt(&c)?))
        }
        None => None,
    };
    let (x, y, _) = generate(grid, d, b.n_paths(), |i, xp, yp| {
        let (bp, wp) = (b.path(i), w.path(i));
        xp.copy_from_slice(bp.values());
        yp[..d].copy_from_slice(bp.point(0));
        let (mut db, mut dw) = (vec![0.0; d], vec![0.0; d]);
        let (mut u, mut v) = (vec![0.0; d], vec![0.0; d]);
        for k in 0..grid.n_steps() {
            let owned;
            let (rt, s) = match &fixed {
                Some((rt, s)) => (rt, s),
                None => {
                    let r = rho.eval(grid.time(k), bp.prefix(k), PathView::new(d, &yp[..(k + 1) * d]));
                    let r = checked_correlation(r, d, k)?;
                    owned = (r.transpose(), complement_sqrt(&r)?);
                    (&owned.0, &owned.1)
                }
            };
            bp.increment_into(k, &mut db);
            wp.increment_into(k, &mut dw);
            rt.mul_vec_into(&db, &mut u);
            s.mul_vec_into(&dw, &mut v);
            for j in 0..d {
                yp[(k + 1) * d + j] = yp[k * d + j] + (u[j] + v[j]);
            }
        }
        Ok(())
    })?;
    CoupledEnsemble::from_values(
        grid,
        d,
        b.n_paths(),
        b.seed(),
        x,
        y,
        Provenance::new("couple_brownians", json!({ "rho": rho.describe() })).wiener(),
    )
}

/// Writes `Y_0 = X_0`, `ΔY_k = Q_k ΔX_k` into `out`.
fn rotate_into(
    q: &dyn RotationProcess,
    fixed: Option<&Matrix>,
    grid: TimeGrid,
    x: PathView<'_>,
    out: &mut [f64],
) -> Result<()> {
    let d = x.dim();
    out[..d].copy_from_slice(x.point(0));
    let (mut dx, mut dy) = (vec![0.0; d], vec![0.0; d]);
    for k in 0..grid.n_steps() {
        x.increment_into(k, &mut dx);
        match fixed {
            Some(m) => m.mul_vec_into(&dx, &mut dy),
            None => checked_rotation(q.eval(grid.time(k), x.prefix(k)), d, k)?.mul_vec_into(&dx, &mut dy),
        }
        for j in 0..d {
            out[(k + 1) * d + j] = out[k * d + j] + dy[j];
        }
    }
    Ok(())
}

fn fixed_rotation(q: &dyn RotationProcess, d: usize) -> Result<Option<Matrix>> {
    check_dim("rotation process", q.dim(), d)?;
    q.constant().map(|m| checked_rotation(m, d, 0)).transpose()
}

/// The Wiener-to-Wiener Monge map `Y = ∫ Q dX` applied to each driver.
pub fn rotation_monge(q: &dyn RotationProcess, drivers: &PathEnsemble) -> Result<CoupledEnsemble> {
    let d = drivers.dim();
    let fixed = fixed_rotation(q, d)?;
    let grid = drivers.grid();
    let (x, y, _) = generate(grid, d, drivers.n_paths(), |i, xp, yp| {
        let xv = drivers.path(i);
        xp.copy_from_slice(xv.values());
        rotate_into(q, fixed.as_ref(), grid, xv, yp)
    })?;
    CoupledEnsemble::from_values(
        grid,
        d,
        drivers.n_paths(),
        drivers.seed(),
        x,
        y,
        Provenance::new("rotation_monge", json!({ "q": q.describe() })).wiener(),
    )
}

/// The Monge map `F^{dst} ∘ (∫Q) ∘ R^{src}` between strong solutions.
pub fn composed_monge(
    src: &SdeModel,
    dst: &SdeModel,
    q: &dyn RotationProcess,
    grid: TimeGrid,
    n: usize,
    seed: u64,
) -> Result<CoupledEnsemble> {
    let drivers = sde::sample_brownian(grid, src.dim(), n, seed)?;
    composed_monge_from(src, dst, q, &drivers)
}

/// [`composed_monge`] on given Brownian drivers of `X`.
///
/// The noise recovered from `X` by the inverse Itô map coincides with the
/// driver up to rounding; the driver itself feeds the rotation so that
/// identity transports are exact. The largest recovery discrepancy is
/// recorded as the `driver_recovery_error` diagnostic.
pub fn composed_monge_from(
    src: &SdeModel,
    dst: &SdeModel,
    q: &dyn RotationProcess,
    drivers: &PathEnsemble,
) -> Result<CoupledEnsemble> {
    let d = src.dim();
    check_dim("driver ensemble", drivers.dim(), d)?;
    check_dim("target model", dst.dim(), d)?;
    let fixed = fixed_rotation(q, d)?;
    let grid = drivers.grid();
    let stride = grid.n_points() * d;
    let (x, y, recovery) = generate(grid, d, drivers.n_paths(), |i, xp, yp| {
        let b = drivers.path(i);
        ito_map_into(src, grid, b, xp);
        let mut w = vec![0.0; stride];
        inverse_ito_map_into(src, grid, PathView::new(d, xp), &mut w)?;
        let err = max_abs_diff(&w, b.values());
        rotate_into(q, fixed.as_ref(), grid, b, &mut w)?;
        ito_map_into(dst, grid, PathView::new(d, &w), yp);
        Ok(err)
    })?;
    check_finite(&x, src.label())?;
    check_finite(&y, dst.label())?;
    let mut out = CoupledEnsemble::from_values(
        grid,
        d,
        drivers.n_paths(),
        drivers.seed(),
        x,
        y,
        Provenance::new("composed_monge", json!({ "q": q.describe() })).models(src, dst),
    )?;
    let worst = recovery.into_iter().fold(0.0_f64, f64::max);
    out.set_diagnostic("driver_recovery_error", json!(worst));
    Ok(out)
}

/// Pushes a Brownian coupling through strong solutions:
/// `(F^{src}(B), F^{dst}(B̃))`.
pub fn push_forward(src: &SdeModel, dst: &SdeModel, wiener: &CoupledEnsemble) -> Result<CoupledEnsemble> {
    let d = wiener.dim();
    check_dim("source model", src.dim(), d)?;
    check_dim("target model", dst.dim(), d)?;
    let grid = wiener.grid();
    let (x, y, _) = generate(grid, d, wiener.n_pairs(), |i, xp, yp| {
        ito_map_into(src, grid, wiener.x_path(i), xp);
        ito_map_into(dst, grid, wiener.y_path(i), yp);
        Ok(())
    })?;
    check_finite(&x, src.label())?;
    check_finite(&y, dst.label())?;
    let inner = &wiener.provenance;
    let mut out = CoupledEnsemble::from_values(
        grid,
        d,
        wiener.n_pairs(),
        wiener.seed(),
        x,
        y,
        Provenance::new(
            format!("push_forward({})", inner.constructor),
            inner.params.clone(),
        )
        .models(src, dst),
    )?;
    out.diagnostics = wiener.diagnostics.clone();
    Ok(out)
}

/// Both SDEs driven by the same Brownian motion.
pub fn synchronous(src: &SdeModel, dst: &SdeModel, grid: TimeGrid, n: usize, seed: u64) -> Result<CoupledEnsemble> {
    baseline(src, dst, grid, n, seed, Baseline::Synchronous)
}

/// `dst` driven by `−B`.
pub fn antithetic(src: &SdeModel, dst: &SdeModel, grid: TimeGrid, n: usize, seed: u64) -> Result<CoupledEnsemble> {
    baseline(src, dst, grid, n, seed, Baseline::Antithetic)
}

/// `dst` driven by a Brownian motion independent of `src`'s.
pub fn independent(src: &SdeModel, dst: &SdeModel, grid: TimeGrid, n: usize, seed: u64) -> Result<CoupledEnsemble> {
    baseline(src, dst, grid, n, seed, Baseline::Independent)
}

#[derive(Clone, Copy)]
enum Baseline {
    Synchronous,
    Antithetic,
    Independent,
}

fn baseline(
    src: &SdeModel,
    dst: &SdeModel,
    grid: TimeGrid,
    n: usize,
    seed: u64,
    kind: Baseline,
) -> Result<CoupledEnsemble> {
    let d = src.dim();
    check_dim("target model", dst.dim(), d)?;
    let b = sde::sample_brownian(grid, d, n, seed)?;
    let w = match kind {
        Baseline::Independent => Some(sde::sample_brownian(grid, d, n, derive_seed(seed, AUX_SALT))?),
        _ => None,
    };
    let (x, y, _) = generate(grid, d, n, |i, xp, yp| {
        let bp = b.path(i);
        ito_map_into(src, grid, bp, xp);
        match kind {
            Baseline::Synchronous => ito_map_into(dst, grid, bp, yp),
            Baseline::Antithetic => {
                let neg: Vec<f64> = bp.values().iter().map(|v| -v).collect();
                ito_map_into(dst, grid, PathView::new(d, &neg), yp);
            }
            Baseline::Independent => {
                let w = w.as_ref().expect("drawn above");
                ito_map_into(dst, grid, w.path(i), yp);
            }
        }
        Ok(())
    })?;
    check_finite(&x, src.label())?;
    check_finite(&y, dst.label())?;
    let name = match kind {
        Baseline::Synchronous => "synchronous",
        Baseline::Antithetic => "antithetic",
        Baseline::Independent => "independent",
    };
    CoupledEnsemble::from_values(grid, d, n, seed, x, y, Provenance::new(name, json!({})).models(src, dst))
}

/// `T_{k+1} = T_k + b̄ Δt + σ̄ Q σ† ΔM_k` along `X ~ src`.
///
/// Diagnostics: `kernel_residual_max` is the largest `‖σ̄Q(Id − P)‖_F`
/// over all pairs and steps (`P` the projection onto the range of `σᵀ`);
/// `kernel_condition` is `"satisfied"` when it stays below
/// [`KERNEL_RESIDUAL_TOL`], `"violated"` otherwise, in which case `T` does
/// not have the law of `dst`.
pub fn monge_sde(
    dst: &SdeModel,
    q: &dyn RotationProcess,
    src: &SdeModel,
    grid: TimeGrid,
    n: usize,
    seed: u64,
) -> Result<CoupledEnsemble> {
    let drivers = sde::sample_brownian(grid, src.dim(), n, seed)?;
    monge_sde_from(dst, q, src, &drivers)
}

/// [`monge_sde`] with `X = F^{src}(drivers)`.
pub fn monge_sde_from(
    dst: &SdeModel,
    q: &dyn RotationProcess,
    src: &SdeModel,
    drivers: &PathEnsemble,
) -> Result<CoupledEnsemble> {
    let d = src.dim();
    check_dim("driver ensemble", drivers.dim(), d)?;
    check_dim("target model", dst.dim(), d)?;
    let fixed_q = fixed_rotation(q, d)?;
    let fixed_src = match src.diffusion().constant() {
        Some(s) => Some((
            linalg::pseudoinverse(&s, DEFAULT_RANK_TOL)?,
            linalg::kernel_projection(&s, DEFAULT_RANK_TOL)?,
        )),
        None => None,
    };
    let grid = drivers.grid();
    let dt = grid.dt();
    let (x, y, residuals) = generate(grid, d, drivers.n_paths(), |i, xp, tp| {
        ito_map_into(src, grid, drivers.path(i), xp);
        let xv = PathView::new(d, xp);
        let (mut s_st, mut d_st) = (Stepper::new(d), Stepper::new(d));
        let (mut dm, mut dw) = (vec![0.0; d], vec![0.0; d]);
        let mut worst = 0.0_f64;
        tp[..d].copy_from_slice(dst.z0());
        for k in 0..grid.n_steps() {
            let t = grid.time(k);
            s_st.eval(src, t, xv.prefix(k));
            let owned;
            let (pinv, kernel) = match &fixed_src {
                Some((p, k0)) => (p, k0),
                None => {
                    owned = (
                        linalg::pseudoinverse(&s_st.sigma, DEFAULT_RANK_TOL).map_err(|e| e.at_step(k))?,
                        linalg::kernel_projection(&s_st.sigma, DEFAULT_RANK_TOL).map_err(|e| e.at_step(k))?,
                    );
                    (&owned.0, &owned.1)
                }
            };
            let qk = match &fixed_q {
                Some(m) => m.clone(),
                None => checked_rotation(q.eval(t, xv.prefix(k)), d, k)?,
            };
            d_st.eval(dst, t, PathView::new(d, &tp[..(k + 1) * d]));
            let sq = d_st.sigma.matmul(&qk);
            if kernel.max_abs() > 0.0 {
                worst = worst.max(sq.matmul(kernel).frobenius());
            }
            xv.increment_into(k, &mut dm);
            for j in 0..d {
                dm[j] -= s_st.drift[j] * dt;
            }
            pinv.mul_vec_into(&dm, &mut dw);
            sq.mul_vec_into(&dw, &mut d_st.tmp);
            for j in 0..d {
                tp[(k + 1) * d + j] = tp[k * d + j] + d_st.drift[j] * dt + d_st.tmp[j];
            }
        }
        Ok(worst)
    })?;
    check_finite(&x, src.label())?;
    check_finite(&y, dst.label())?;
    let mut out = CoupledEnsemble::from_values(
        grid,
        d,
        drivers.n_paths(),
        drivers.seed(),
        x,
        y,
        Provenance::new("monge_sde", json!({ "q": q.describe() })).models(src, dst),
    )?;
    let worst = residuals.into_iter().fold(0.0_f64, f64::max);
    out.set_diagnostic("kernel_residual_max", json!(worst));
    let status = if worst <= KERNEL_RESIDUAL_TOL { "satisfied" } else { "violated" };
    out.set_diagnostic("kernel_condition", json!(status));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    /// No bicausal Monge map exists.
    Infeasible,
    /// The probes do not rule one out.
    Undecided,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Feasibility {
    pub verdict: Verdict,
    pub min_kernel_dim_src: usize,
    pub max_kernel_dim_dst: usize,
    pub n_probes_src: usize,
    pub n_probes_dst: usize,
}

/// Sample-based non-existence test: `INFEASIBLE` iff
/// `max dim Ker σ̄ < min dim Ker σ` over the probes.
pub fn feasibility_check(sigma: &[Matrix], sigma_bar: &[Matrix], rank_tol: f64) -> Result<Feasibility> {
    if sigma.is_empty() || sigma_bar.is_empty() {
        return Err(Error::Invalid("feasibility_check needs nonempty probe lists".into()));
    }
    let min_src = sigma
        .iter()
        .map(|m| linalg::kernel_dim(m, rank_tol))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .expect("nonempty");
    let max_dst = sigma_bar
        .iter()
        .map(|m| linalg::kernel_dim(m, rank_tol))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .expect("nonempty");
    Ok(Feasibility {
        verdict: if max_dst < min_src { Verdict::Infeasible } else { Verdict::Undecided },
        min_kernel_dim_src: min_src,
        max_kernel_dim_dst: max_dst,
        n_probes_src: sigma.len(),
        n_probes_dst: sigma_bar.len(),
    })
}

/// Evaluates `model`'s diffusion along every path at every `every`-th step.
pub fn diffusion_probes(model: &SdeModel, paths: &PathEnsemble, every: usize) -> Result<Vec<Matrix>> {
    check_dim("probe paths", paths.dim(), model.dim())?;
    let every = every.max(1);
    let grid = paths.grid();
    let d = model.dim();
    let mut out = Vec::new();
    for p in paths.paths() {
        for k in (0..grid.n_steps()).step_by(every) {
            let mut m = Matrix::zeros(d, d);
            model.diffusion().eval(grid.time(k), p.prefix(k), &mut m);
            out.push(m);
        }
    }
    Ok(out)
}

/// The Tanaka coupling: `Y` Brownian, `ΔX_k = sign(Y_k) ΔY_k` with
/// `sign(0) = −1`. Pairs are `(X, Y)`.
pub fn tanaka_coupling(grid: TimeGrid, n: usize, seed: u64) -> Result<CoupledEnsemble> {
    tanaka_from(&sde::sample_brownian(grid, 1, n, seed)?)
}

pub fn tanaka_from(y_drivers: &PathEnsemble) -> Result<CoupledEnsemble> {
    check_dim("tanaka driver", y_drivers.dim(), 1)?;
    let grid = y_drivers.grid();
    let (x, y, _) = generate(grid, 1, y_drivers.n_paths(), |i, xp, yp| {
        let yv = y_drivers.path(i);
        yp.copy_from_slice(yv.values());
        xp[0] = 0.0;
        for k in 0..grid.n_steps() {
            let s = if yp[k] > 0.0 { 1.0 } else { -1.0 };
            xp[k + 1] = xp[k] + s * (yp[k + 1] - yp[k]);
        }
        Ok(())
    })?;
    CoupledEnsemble::from_values(
        grid,
        1,
        y_drivers.n_paths(),
        y_drivers.seed(),
        x,
        y,
        Provenance::new("tanaka", json!({})).wiener(),
    )
}

/// Rotation Monge coupling in `d = 1` whose `Q` flips between `+1` and
/// `−1` with duty cycle `(1 + c)/2` inside every block of `block` steps.
///
/// The duty cycle is rounded to a whole number of steps; the achieved
/// value is recorded in the `duty_achieved` and `c_achieved` diagnostics.
pub fn rotation_chop(c: f64, grid: TimeGrid, n: usize, seed: u64, block: usize) -> Result<CoupledEnsemble> {
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::Invalid(format!("rotation_chop target c = {c} is outside [-1, 1]")));
    }
    if block == 0 || grid.n_steps() % block != 0 {
        return Err(Error::Invalid(format!(
            "block {block} does not divide n_steps {}",
            grid.n_steps()
        )));
    }
    let duty = (1.0 + c) / 2.0;
    let exact = block as f64 * duty;
    let on = exact.round() as usize;
    let q = ChopRotation { dim: 1, block, on };
    let mut out = rotation_monge(&q, &sde::sample_brownian(grid, 1, n, seed)?)?;
    out.provenance = Provenance::new("rotation_chop", json!({ "c": c, "block": block })).wiener();
    let achieved = on as f64 / block as f64;
    out.set_diagnostic("duty_requested", json!(duty));
    out.set_diagnostic("duty_achieved", json!(achieved));
    out.set_diagnostic("c_achieved", json!(2.0 * achieved - 1.0));
    out.set_diagnostic("duty_quantized", json!((exact - on as f64).abs() > 1e-12));
    Ok(out)
}
