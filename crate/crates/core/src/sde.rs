//! Time grids, sample paths, coefficient functionals and the discrete
//! Itô map.
//!
//! Paths live on the uniform grid `t_k = k / n` of `[0, 1]`. Coefficients
//! are evaluated at the left endpoint of each step and only ever see the
//! prefix `values[0..=k]`, so every solver here is non-anticipative by
//! construction.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, DEFAULT_RANK_TOL};
use crate::rng::{fill_gaussian, path_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Invalid("time grid needs at least one step".into()));
        }
        Ok(Self { n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.n_steps as f64
    }
}

/// Borrowed path prefix: points `0..len()` of a `dim`-dimensional path.
#[derive(Clone, Copy)]
pub struct PathView<'a> {
    dim: usize,
    values: &'a [f64],
}

impl<'a> PathView<'a> {
    pub fn new(dim: usize, values: &'a [f64]) -> Self {
        debug_assert!(dim > 0 && values.len() % dim == 0);
        Self { dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of points in the view.
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the last visible point.
    pub fn step(&self) -> usize {
        self.len() - 1
    }

    pub fn point(&self, k: usize) -> &'a [f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn current(&self) -> &'a [f64] {
        self.point(self.step())
    }

    /// Points `0..=k`.
    pub fn prefix(&self, k: usize) -> PathView<'a> {
        PathView::new(self.dim, &self.values[..(k + 1) * self.dim])
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    /// Increment `x_{k+1} - x_k` written into `out`.
    pub fn increment_into(&self, k: usize, out: &mut [f64]) {
        let (a, b) = (self.point(k), self.point(k + 1));
        for ((o, x1), x0) in out.iter_mut().zip(b).zip(a) {
            *o = x1 - x0;
        }
    }
}

impl fmt::Debug for PathView<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PathView")
            .field("dim", &self.dim)
            .field("len", &self.len())
            .finish()
    }
}

/// One discretized trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl SamplePath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != grid.n_points() * dim {
            return Err(Error::dimension(format!(
                "path needs {} values for d={dim}, got {}",
                grid.n_points() * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("path values must be finite"));
        }
        Ok(Self { grid, dim, values })
    }

    /// Path from a function of time, `f(t) -> point`.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.n_points() * dim);
        for k in 0..grid.n_points() {
            let p = f(grid.time(k));
            if p.len() != dim {
                return Err(Error::dimension("path point has wrong dimension"));
            }
            values.extend(p);
        }
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn view(&self) -> PathView<'_> {
        PathView::new(self.dim, &self.values)
    }

    pub fn point(&self, k: usize) -> &[f64] {
        self.view().point(k)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Largest absolute coordinate difference with `other`.
    pub fn max_distance(&self, other: &SamplePath) -> f64 {
        max_abs_diff(&self.values, &other.values)
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// `N` paths on a shared grid, stored path-major in one buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: u64,
    values: Vec<f64>,
}

impl PathEnsemble {
    pub fn from_values(
        grid: TimeGrid,
        dim: usize,
        n_paths: usize,
        seed: u64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || n_paths == 0 {
            return Err(Error::Invalid("ensemble needs d >= 1 and N >= 1".into()));
        }
        if values.len() != n_paths * grid.n_points() * dim {
            return Err(Error::dimension("ensemble buffer has wrong length"));
        }
        Ok(Self {
            grid,
            dim,
            n_paths,
            seed,
            values,
        })
    }

    pub fn from_paths(paths: &[SamplePath], seed: u64) -> Result<Self> {
        let first = paths.first().ok_or_else(|| Error::Invalid("no paths".into()))?;
        let (grid, dim) = (first.grid, first.dim);
        if paths.iter().any(|p| p.grid != grid || p.dim != dim) {
            return Err(Error::dimension("ensemble paths must share grid and dimension"));
        }
        let values = paths.iter().flat_map(|p| p.values.iter().copied()).collect();
        Self::from_values(grid, dim, paths.len(), seed, values)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn stride(&self) -> usize {
        self.grid.n_points() * self.dim
    }

    pub fn path(&self, i: usize) -> PathView<'_> {
        let s = self.stride();
        PathView::new(self.dim, &self.values[i * s..(i + 1) * s])
    }

    pub fn paths(&self) -> impl ExactSizeIterator<Item = PathView<'_>> + '_ {
        self.values
            .chunks_exact(self.stride())
            .map(move |c| PathView::new(self.dim, c))
    }

    pub fn sample_path(&self, i: usize) -> SamplePath {
        SamplePath {
            grid: self.grid,
            dim: self.dim,
            values: self.path(i).values().to_vec(),
        }
    }

    /// Values of every path at step `k`, path-major.
    pub fn slice_at(&self, k: usize) -> Vec<f64> {
        self.paths().flat_map(|p| p.point(k).to_vec()).collect()
    }
}

/// Progressively measurable drift `b(t, ω)`.
///
/// `prefix` holds the path up to and including the current step; `out` has
/// length [`dim`](Self::dim).
pub trait DriftField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, prefix: PathView<'_>, out: &mut [f64]);
    /// Declares that the drift depends on time only.
    fn time_only(&self) -> bool {
        false
    }
    fn describe(&self) -> String;
}

/// Progressively measurable diffusion `σ(t, ω)`, a `d × d` matrix.
pub trait DiffusionField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, prefix: PathView<'_>, out: &mut Matrix);
    /// Returns the matrix when it does not depend on `(t, ω)`.
    fn constant(&self) -> Option<Matrix> {
        None
    }
    fn describe(&self) -> String;
}

/// Drift given by a closure.
pub struct FnDrift<F> {
    dim: usize,
    label: String,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(f64, PathView<'_>, &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, label: impl Into<String>, f: F) -> Self {
        Self {
            dim,
            label: label.into(),
            f,
        }
    }
}

impl<F> DriftField for FnDrift<F>
where
    F: Fn(f64, PathView<'_>, &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, prefix: PathView<'_>, out: &mut [f64]) {
        (self.f)(t, prefix, out)
    }
    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// Diffusion given by a closure.
pub struct FnDiffusion<F> {
    dim: usize,
    label: String,
    f: F,
}

impl<F> FnDiffusion<F>
where
    F: Fn(f64, PathView<'_>, &mut Matrix) + Send + Sync,
{
    pub fn new(dim: usize, label: impl Into<String>, f: F) -> Self {
        Self {
            dim,
            label: label.into(),
            f,
        }
    }
}

impl<F> DiffusionField for FnDiffusion<F>
where
    F: Fn(f64, PathView<'_>, &mut Matrix) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, prefix: PathView<'_>, out: &mut Matrix) {
        (self.f)(t, prefix, out)
    }
    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// `dZ = b(t, Z) dt + σ(t, Z) dB`, `Z_0 = z0`.
#[derive(Clone)]
pub struct SdeModel {
    z0: Vec<f64>,
    drift: Arc<dyn DriftField>,
    diffusion: Arc<dyn DiffusionField>,
    label: String,
}

impl SdeModel {
    pub fn new(
        label: impl Into<String>,
        z0: Vec<f64>,
        drift: Arc<dyn DriftField>,
        diffusion: Arc<dyn DiffusionField>,
    ) -> Result<Self> {
        let d = z0.len();
        if d == 0 || drift.dim() != d || diffusion.dim() != d {
            return Err(Error::dimension(format!(
                "model dimensions disagree: z0 {d}, drift {}, diffusion {}",
                drift.dim(),
                diffusion.dim()
            )));
        }
        if z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("initial condition must be finite"));
        }
        Ok(Self {
            z0,
            drift,
            diffusion,
            label: label.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.z0.len()
    }

    pub fn z0(&self) -> &[f64] {
        &self.z0
    }

    pub fn drift(&self) -> &Arc<dyn DriftField> {
        &self.drift
    }

    pub fn diffusion(&self) -> &Arc<dyn DiffusionField> {
        &self.diffusion
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Same coefficients under a different name.
    pub fn relabel(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_diffusion(&self, diffusion: Arc<dyn DiffusionField>) -> Result<Self> {
        Self::new(self.label.clone(), self.z0.clone(), self.drift.clone(), diffusion)
    }

    fn check_dim(&self, d: usize, what: &str) -> Result<()> {
        if d != self.dim() {
            return Err(Error::dimension(format!(
                "{what} has dimension {d}, model '{}' has {}",
                self.label,
                self.dim()
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("label", &self.label)
            .field("z0", &self.z0)
            .field("drift", &self.drift.describe())
            .field("diffusion", &self.diffusion.describe())
            .finish()
    }
}

/// Scratch buffers for one-path Euler–Maruyama recursions.
pub(crate) struct Stepper {
    pub drift: Vec<f64>,
    pub sigma: Matrix,
    pub tmp: Vec<f64>,
}

impl Stepper {
    pub fn new(d: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            sigma: Matrix::zeros(d, d),
            tmp: vec![0.0; d],
        }
    }

    /// Evaluates `b` and `σ` at the last point of `prefix`.
    pub fn eval(&mut self, model: &SdeModel, t: f64, prefix: PathView<'_>) {
        model.drift.eval(t, prefix, &mut self.drift);
        model.diffusion.eval(t, prefix, &mut self.sigma);
    }
}

/// Writes `z_{k+1} = z_k + drift·Δt + σ·Δw` into `buf` given `z_0..z_k`.
///
/// `buf` holds the full path; `steps` and `drift`/`sigma` are evaluated by
/// the caller for time `k`.
#[inline]
pub(crate) fn advance(buf: &mut [f64], d: usize, k: usize, dt: f64, st: &mut Stepper, dw: &[f64]) {
    st.sigma.mul_vec_into(dw, &mut st.tmp);
    let (head, tail) = buf.split_at_mut((k + 1) * d);
    let cur = &head[k * d..];
    for i in 0..d {
        tail[i] = cur[i] + st.drift[i] * dt + st.tmp[i];
    }
}

/// Euler–Maruyama solution driven by the increments of `driver`, written
/// into `out` (length `(n+1)·d`).
pub(crate) fn ito_map_into(
    model: &SdeModel,
    grid: TimeGrid,
    driver: PathView<'_>,
    out: &mut [f64],
) {
    let d = model.dim();
    let dt = grid.dt();
    let mut st = Stepper::new(d);
    let mut dw = vec![0.0; d];
    out[..d].copy_from_slice(&model.z0);
    for k in 0..grid.n_steps() {
        let prefix = PathView::new(d, &out[..(k + 1) * d]);
        st.eval(model, grid.time(k), prefix);
        driver.increment_into(k, &mut dw);
        advance(out, d, k, dt, &mut st, &dw);
    }
}

/// Increments `σ(k, X)^{-1} (ΔX_k − b(k, X) Δt)` of the recovered noise,
/// cumulated into `out` starting from 0.
pub(crate) fn inverse_ito_map_into(
    model: &SdeModel,
    grid: TimeGrid,
    solution: PathView<'_>,
    out: &mut [f64],
) -> Result<()> {
    let d = model.dim();
    let dt = grid.dt();
    let mut st = Stepper::new(d);
    let mut dm = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let fixed_inv = match model.diffusion.constant() {
        Some(s) => Some(linalg::inverse(&s, DEFAULT_RANK_TOL).map_err(|e| e.at_step(0))?),
        None => None,
    };
    out[..d].iter_mut().for_each(|v| *v = 0.0);
    for k in 0..grid.n_steps() {
        let prefix = solution.prefix(k);
        st.eval(model, grid.time(k), prefix);
        solution.increment_into(k, &mut dm);
        for i in 0..d {
            dm[i] -= st.drift[i] * dt;
        }
        match &fixed_inv {
            Some(m) => m.mul_vec_into(&dm, &mut dw),
            None => linalg::inverse(&st.sigma, DEFAULT_RANK_TOL)
                .map_err(|e| e.at_step(k))?
                .mul_vec_into(&dm, &mut dw),
        }
        let (head, tail) = out.split_at_mut((k + 1) * d);
        for i in 0..d {
            tail[i] = head[k * d + i] + dw[i];
        }
    }
    Ok(())
}

/// Simulates `N` independent `d`-dimensional discrete Brownian motions.
pub fn sample_brownian(grid: TimeGrid, d: usize, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if d == 0 || n_paths == 0 {
        return Err(Error::Invalid("sample_brownian needs d >= 1 and N >= 1".into()));
    }
    let stride = grid.n_points() * d;
    let mut values = vec![0.0; n_paths * stride];
    values
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(i, path)| {
            let mut rng = path_rng(seed, i);
            brownian_into(&mut rng, grid, d, path);
        });
    PathEnsemble::from_values(grid, d, n_paths, seed, values)
}

/// Fills one path buffer with a Brownian path started at 0.
pub(crate) fn brownian_into<R: rand::Rng + ?Sized>(rng: &mut R, grid: TimeGrid, d: usize, path: &mut [f64]) {
    let dt = grid.dt();
    path[..d].iter_mut().for_each(|v| *v = 0.0);
    fill_gaussian(rng, dt, &mut path[d..]);
    for k in 1..grid.n_points() {
        for i in 0..d {
            path[k * d + i] += path[(k - 1) * d + i];
        }
    }
}

/// The discrete Itô map `F^{σ,b}`: Euler–Maruyama driven by `driver`'s
/// increments.
pub fn ito_map(model: &SdeModel, driver: &SamplePath) -> Result<SamplePath> {
    model.check_dim(driver.dim, "driver")?;
    let mut out = vec![0.0; driver.values.len()];
    ito_map_into(model, driver.grid, driver.view(), &mut out);
    SamplePath::new(driver.grid, driver.dim, out)
}

/// The inverse map `R^{σ,b}_z`, recovering the driving noise of `solution`.
pub fn inverse_ito_map(model: &SdeModel, solution: &SamplePath) -> Result<SamplePath> {
    model.check_dim(solution.dim, "solution")?;
    let mut out = vec![0.0; solution.values.len()];
    inverse_ito_map_into(model, solution.grid, solution.view(), &mut out)?;
    SamplePath::new(solution.grid, solution.dim, out)
}

/// Canonical semimartingale split of a path under `model`.
#[derive(Clone, Debug)]
pub struct Decomposition {
    /// `z0 + Σ_{j<k} b(j, path) Δt`
    pub finite_variation: SamplePath,
    /// `path − finite_variation`
    pub martingale: SamplePath,
}

pub(crate) fn decompose_into(
    model: &SdeModel,
    grid: TimeGrid,
    path: PathView<'_>,
    fv: &mut [f64],
    mart: &mut [f64],
) {
    let d = model.dim();
    let dt = grid.dt();
    let mut b = vec![0.0; d];
    fv[..d].copy_from_slice(&model.z0);
    for k in 0..grid.n_steps() {
        model.drift.eval(grid.time(k), path.prefix(k), &mut b);
        for i in 0..d {
            fv[(k + 1) * d + i] = fv[k * d + i] + b[i] * dt;
        }
    }
    for ((m, x), v) in mart.iter_mut().zip(path.values()).zip(fv.iter()) {
        *m = x - v;
    }
}

pub fn decompose(model: &SdeModel, path: &SamplePath) -> Result<Decomposition> {
    model.check_dim(path.dim, "path")?;
    let len = path.values.len();
    let (mut fv, mut mart) = (vec![0.0; len], vec![0.0; len]);
    decompose_into(model, path.grid, path.view(), &mut fv, &mut mart);
    Ok(Decomposition {
        finite_variation: SamplePath::new(path.grid, path.dim, fv)?,
        martingale: SamplePath::new(path.grid, path.dim, mart)?,
    })
}

/// Pushes `drivers` through the Itô map of `model`, path by path.
pub fn ito_map_ensemble(model: &SdeModel, drivers: &PathEnsemble) -> Result<PathEnsemble> {
    model.check_dim(drivers.dim, "driver ensemble")?;
    let stride = drivers.stride();
    let grid = drivers.grid;
    let mut values = vec![0.0; drivers.values.len()];
    values
        .par_chunks_mut(stride)
        .zip(drivers.values.par_chunks(stride))
        .for_each(|(out, drv)| ito_map_into(model, grid, PathView::new(model.dim(), drv), out));
    check_finite(&values, &model.label)?;
    PathEnsemble::from_values(grid, drivers.dim, drivers.n_paths, drivers.seed, values)
}

/// `N` Euler–Maruyama paths of `model` driven by `sample_brownian(seed)`.
pub fn simulate(model: &SdeModel, grid: TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    let drivers = sample_brownian(grid, model.dim(), n_paths, seed)?;
    ito_map_ensemble(model, &drivers)
}

pub(crate) fn check_finite(values: &[f64], label: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!(
            "non-finite value in output of '{label}' (buffer offset {pos}); the scheme diverged"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(n).unwrap()
    }

    #[test]
    fn grid_is_uniform_on_unit_interval() {
        let g = grid(8);
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(8), 1.0);
        assert_eq!(g.dt(), 0.125);
        assert!(TimeGrid::new(0).is_err());
    }

    #[test]
    fn single_step_brownian_is_standard_normal_draw() {
        let e = sample_brownian(grid(1), 2, 1, 3).unwrap();
        assert_eq!(e.path(0).point(0), &[0.0, 0.0]);
        assert!(e.path(0).point(1).iter().all(|v| v.is_finite() && *v != 0.0));
    }

    #[test]
    fn brownian_terminal_moments() {
        let n = 100_000;
        let d = 2;
        let e = sample_brownian(grid(4), d, n, 11).unwrap();
        let terminal = e.slice_at(4);
        for i in 0..d {
            let xs: Vec<f64> = terminal.iter().skip(i).step_by(d).copied().collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // CLT bound on the mean, ±0.05 on the unit variance.
            assert!(mean.abs() < 4.0 * (1.0 / n as f64).sqrt() * (d as f64).sqrt());
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn ensembles_are_reproducible() {
        let a = sample_brownian(grid(16), 2, 50, 5).unwrap();
        let b = sample_brownian(grid(16), 2, 50, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_brownian(grid(16), 2, 50, 6).unwrap());
        // Thread count does not change the result.
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| sample_brownian(grid(16), 2, 50, 5).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn identity_ito_map_reproduces_driver() {
        let bm = presets::brownian(2);
        let drv = sample_brownian(grid(64), 2, 1, 1).unwrap().sample_path(0);
        let out = ito_map(&bm, &drv).unwrap();
        assert!(out.max_distance(&drv) < 1e-14);
    }

    #[test]
    fn deterministic_ode_is_a_line() {
        let model = presets::constant(vec![1.0], vec![0.5], Matrix::zeros(1, 1)).unwrap();
        let drv = sample_brownian(grid(32), 1, 1, 2).unwrap().sample_path(0);
        let out = ito_map(&model, &drv).unwrap();
        for k in 0..=32 {
            assert!((out.point(k)[0] - (1.0 + 0.5 * grid(32).time(k))).abs() < 1e-14);
        }
    }

    #[test]
    fn ito_map_rejects_dimension_mismatch() {
        let bm = presets::brownian(2);
        let drv = sample_brownian(grid(4), 1, 1, 1).unwrap().sample_path(0);
        assert!(matches!(ito_map(&bm, &drv), Err(Error::Dimension(_))));
    }

    #[test]
    fn ou_terminal_variance() {
        let g = grid(1 << 10);
        let ou = presets::ou(1, 1.0, 0.0, 1.0, 0.0);
        let e = simulate(&ou, g, 100_000, 9).unwrap();
        let xs = e.slice_at(g.n_steps());
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        // Var of the sample variance of a Gaussian is 2σ⁴/(n-1).
        let se = exact * (2.0 / (n - 1.0)).sqrt();
        assert!((var - exact).abs() < 3.0 * se + 0.01, "var {var} vs {exact}");
    }

    #[test]
    fn inverse_of_identity_model_shifts_to_zero() {
        let bm = presets::brownian(1).relabel("bm");
        let path = SamplePath::from_fn(grid(8), 1, |t| vec![3.0 + t * t]).unwrap();
        let w = inverse_ito_map(&bm, &path).unwrap();
        for k in 0..=8 {
            assert!((w.point(k)[0] - (path.point(k)[0] - 3.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn round_trip_is_exact_up_to_rounding() {
        let g = grid(1 << 10);
        let model = presets::ou(2, 0.7, 0.3, 1.5, 0.1);
        let drv = sample_brownian(g, 2, 4, 21).unwrap();
        for i in 0..4 {
            let w = drv.sample_path(i);
            let back = inverse_ito_map(&model, &ito_map(&model, &w).unwrap()).unwrap();
            assert!(back.max_distance(&w) < 1e-10);
        }
    }

    #[test]
    fn round_trip_with_state_dependent_diffusion() {
        // σ(x) = 1 + x², b = 0.
        let g = grid(256);
        let model = SdeModel::new(
            "quadratic",
            vec![0.0],
            Arc::new(presets::ZeroDrift { dim: 1 }),
            Arc::new(FnDiffusion::new(1, "1+x^2", |_, p, out: &mut Matrix| {
                let x = p.current()[0];
                out[(0, 0)] = 1.0 + x * x;
            })),
        )
        .unwrap();
        let drv = sample_brownian(g, 1, 8, 4).unwrap();
        for i in 0..8 {
            let w = drv.sample_path(i);
            let x = ito_map(&model, &w).unwrap();
            let back = inverse_ito_map(&model, &x).unwrap();
            assert!(back.max_distance(&w) < 1e-12, "{}", back.max_distance(&w));
        }
    }

    #[test]
    fn inverse_reports_singular_step() {
        // σ vanishes once the path crosses 1.
        let model = SdeModel::new(
            "degenerate",
            vec![0.0],
            Arc::new(presets::ZeroDrift { dim: 1 }),
            Arc::new(FnDiffusion::new(1, "step", |_, p, out: &mut Matrix| {
                out[(0, 0)] = if p.current()[0] >= 1.0 { 0.0 } else { 1.0 };
            })),
        )
        .unwrap();
        let path = SamplePath::from_fn(grid(4), 1, |t| vec![4.0 * t]).unwrap();
        match inverse_ito_map(&model, &path) {
            Err(Error::Singular { step: Some(1), .. }) => {}
            other => panic!("expected singular at step 1, got {other:?}"),
        }
    }

    #[test]
    fn decompose_examples() {
        let g = grid(64);
        let bm = presets::brownian(1);
        let p = sample_brownian(g, 1, 1, 8).unwrap().sample_path(0);
        let dec = decompose(&bm, &p).unwrap();
        assert!(dec.finite_variation.values().iter().all(|&v| v == 0.0));
        assert!(dec.martingale.max_distance(&p) == 0.0);

        let line = presets::constant(vec![0.0], vec![2.0], Matrix::zeros(1, 1)).unwrap();
        let p = ito_map(&line, &p).unwrap();
        let dec = decompose(&line, &p).unwrap();
        assert!(dec.martingale.values().iter().all(|v| v.abs() < 1e-14));

        let ou = presets::ou(1, 1.0, 0.0, 1.0, 0.5);
        let x = simulate(&ou, g, 3, 1).unwrap().sample_path(2);
        let dec = decompose(&ou, &x).unwrap();
        for k in 0..=64 {
            let sum = dec.finite_variation.point(k)[0] + dec.martingale.point(k)[0];
            assert!((sum - x.point(k)[0]).abs() < 1e-14);
        }
        assert_eq!(dec.martingale.point(0)[0], 0.0);
    }

    #[test]
    fn ou_martingale_increments_uncorrelated_at_lag_one() {
        let g = grid(64);
        let n = 4000;
        let ou = presets::ou(1, 2.0, 0.0, 1.0, 1.0);
        let e = simulate(&ou, g, n, 13).unwrap();
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let dec = decompose(&ou, &e.sample_path(i)).unwrap();
            let m = dec.martingale.values();
            for k in 0..63 {
                let a = m[k + 1] - m[k];
                let b = m[k + 2] - m[k + 1];
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
            }
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() < 3.0 / ((n * 64) as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn ito_map_is_non_anticipative() {
        let g = grid(32);
        let model = presets::running_max(1, 1.0);
        let a = sample_brownian(g, 1, 2, 3).unwrap();
        let (p, q) = (a.sample_path(0), a.sample_path(1));
        let split = 17;
        // Splice: p's increments up to `split`, q's after.
        let mut spliced = p.values().to_vec();
        for k in split..32 {
            let inc = q.point(k + 1)[0] - q.point(k)[0];
            spliced[k + 1] = spliced[k] + inc;
        }
        let spliced = SamplePath::new(g, 1, spliced).unwrap();
        let xa = ito_map(&model, &p).unwrap();
        let xb = ito_map(&model, &spliced).unwrap();
        assert_eq!(&xa.values()[..=split], &xb.values()[..=split]);
        assert_ne!(xa.values()[split + 1], xb.values()[split + 1]);
    }
}
