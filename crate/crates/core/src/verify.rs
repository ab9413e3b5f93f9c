//! Statistical certification of simulated ensembles.
//!
//! All estimators reduce over paths in index order, so reports are
//! bit-stable for a fixed ensemble.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::coupling::CoupledEnsemble;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, DEFAULT_RANK_TOL};
use crate::sde::{PathEnsemble, PathView};

/// Default window for `ρ̂`, in steps.
pub const DEFAULT_WINDOW: usize = 64;

/// Accuracy separating adapted from non-adapted couplings.
pub const ADAPTEDNESS_THRESHOLD: f64 = 0.75;

/// Smallest ensemble accepted by [`adaptedness_probe`].
pub const ADAPTEDNESS_MIN_N: usize = 1000;

/// Coarse grid of the adaptedness features: `X` at `t = j/8`.
const ADAPTEDNESS_POINTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Comparison {
    /// pass iff statistic ≤ threshold
    #[serde(rename = "<=")]
    AtMost,
    /// pass iff statistic ≥ threshold
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Clone, Debug, Serialize)]
pub struct TestReport {
    pub test: String,
    pub statistic: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub pass: bool,
    #[serde(rename = "N")]
    pub n: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl TestReport {
    fn new(
        test: &str,
        statistic: f64,
        threshold: f64,
        comparison: Comparison,
        (n, n_steps, seed): (usize, usize, u64),
        details: Value,
    ) -> Self {
        let pass = match comparison {
            Comparison::AtMost => statistic <= threshold,
            Comparison::AtLeast => statistic >= threshold,
        };
        Self {
            test: test.into(),
            statistic,
            threshold,
            comparison,
            pass,
            n,
            n_steps,
            seed,
            details,
        }
    }
}

/// One report per line.
pub fn write_jsonl<W: Write>(reports: &[TestReport], mut w: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Increment `j` of `p` at step `k`.
#[inline]
fn inc(p: PathView<'_>, k: usize, j: usize) -> f64 {
    p.point(k + 1)[j] - p.point(k)[j]
}

/// Moment tests that `ensemble` is a discrete `d`-dimensional Brownian
/// motion on `[0, 1]`.
///
/// Sub-checks on increments pooled over paths and steps: per-component
/// mean, variance against `Δt`, lag-1 autocorrelation, cross-component
/// correlation, and variance of `X_1 − X_0` against 1. Each yields a
/// z-score; the statistic is the largest `|z|` and the threshold the
/// Bonferroni-corrected `z_{1−α/(2m)}` over the `m` sub-checks.
pub fn wiener_marginal_test(ensemble: &PathEnsemble, alpha: f64) -> Result<TestReport> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Invalid(format!("alpha must lie in (0, 0.5), got {alpha}")));
    }
    let d = ensemble.dim();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let np = ensemble.n_paths();
    if np < 2 {
        return Err(Error::Invalid("marginal test needs at least 2 paths".into()));
    }
    let dt = grid.dt();

    // Per path: Σ inc, Σ inc², Σ inc_k inc_{k+1}, Σ inc_i inc_j, terminal.
    #[derive(Clone)]
    struct Sums {
        s1: Vec<f64>,
        s2: Vec<f64>,
        lag: Vec<f64>,
        cross: Vec<f64>,
        term: Vec<f64>,
    }
    let per_path: Vec<Sums> = (0..np)
        .into_par_iter()
        .map(|i| {
            let p = ensemble.path(i);
            let mut s = Sums {
                s1: vec![0.0; d],
                s2: vec![0.0; d],
                lag: vec![0.0; d],
                cross: vec![0.0; d * d],
                term: vec![0.0; d],
            };
            for k in 0..n {
                for a in 0..d {
                    let x = inc(p, k, a);
                    s.s1[a] += x;
                    s.s2[a] += x * x;
                    if k + 1 < n {
                        s.lag[a] += x * inc(p, k + 1, a);
                    }
                    for b in a + 1..d {
                        s.cross[a * d + b] += x * inc(p, k, b);
                    }
                }
            }
            for a in 0..d {
                s.term[a] = p.point(n)[a] - p.point(0)[a];
            }
            s
        })
        .collect();

    let m_inc = (np * n) as f64;
    let mut z: Vec<(String, f64)> = Vec::new();
    for a in 0..d {
        let s1: f64 = per_path.iter().map(|s| s.s1[a]).sum();
        let s2: f64 = per_path.iter().map(|s| s.s2[a]).sum();
        let mean = s1 / m_inc;
        z.push((format!("mean[{a}]"), mean / (dt / m_inc).sqrt()));
        let var = (s2 - m_inc * mean * mean) / (m_inc - 1.0);
        z.push((format!("variance[{a}]"), (var - dt) / (dt * (2.0 / (m_inc - 1.0)).sqrt())));
        if n > 1 {
            let lag: f64 = per_path.iter().map(|s| s.lag[a]).sum();
            let m_lag = (np * (n - 1)) as f64;
            let r = (lag / m_lag) / (s2 / m_inc);
            z.push((format!("lag1[{a}]"), r * m_lag.sqrt()));
        }
        let t: Vec<f64> = per_path.iter().map(|s| s.term[a]).collect();
        let tm = t.iter().sum::<f64>() / np as f64;
        let tv = t.iter().map(|x| (x - tm).powi(2)).sum::<f64>() / (np as f64 - 1.0);
        z.push((
            format!("terminal_variance[{a}]"),
            (tv - 1.0) / (2.0 / (np as f64 - 1.0)).sqrt(),
        ));
    }
    for a in 0..d {
        for b in a + 1..d {
            let c: f64 = per_path.iter().map(|s| s.cross[a * d + b]).sum();
            let sa: f64 = per_path.iter().map(|s| s.s2[a]).sum();
            let sb: f64 = per_path.iter().map(|s| s.s2[b]).sum();
            let r = c / (sa * sb).sqrt();
            z.push((format!("cross[{a},{b}]"), r * m_inc.sqrt()));
        }
    }
    let m = z.len();
    let threshold = normal_quantile(1.0 - alpha / (2.0 * m as f64));
    let statistic = z.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let details: serde_json::Map<String, Value> = z.into_iter().map(|(k, v)| (k, json!(v))).collect();
    Ok(TestReport::new(
        "wiener_marginal",
        statistic,
        threshold,
        Comparison::AtMost,
        (np, n, ensemble.seed()),
        json!({ "alpha": alpha, "z": details }),
    ))
}

/// Ensemble averages of the realized covariation `[X, Y]_k = Σ_{j<k} ΔX_j ΔY_jᵀ`.
#[derive(Clone, Debug, Serialize)]
pub struct Covariation {
    pub window: usize,
    /// `E[X, Y]_k` for `k = 0..=n`.
    pub per_step: Vec<Matrix>,
    pub terminal: Matrix,
    /// Entrywise standard error of `terminal`.
    pub terminal_stderr: Matrix,
    /// Ensemble mean of `Δ[X, Y] / (w Δt)` on left-aligned windows of `w` steps.
    pub windowed: Vec<Matrix>,
}

fn check_window(w: usize, n: usize) -> Result<usize> {
    if w == 0 {
        return Err(Error::Invalid("window must be at least one step".into()));
    }
    Ok(w.min(n))
}

fn outer_increment(x: PathView<'_>, y: PathView<'_>, k: usize, out: &mut [f64]) {
    let d = x.dim();
    for a in 0..d {
        let dx = inc(x, k, a);
        for b in 0..d {
            out[a * d + b] += dx * inc(y, k, b);
        }
    }
}

pub fn realized_covariation(ensemble: &CoupledEnsemble, window: usize) -> Result<Covariation> {
    let d = ensemble.dim();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let w = check_window(window, n)?;
    let np = ensemble.n_pairs();
    let dd = d * d;
    // Cumulative per-pair covariation at every step, reduced in pair order.
    let per_pair: Vec<Vec<f64>> = (0..np)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (ensemble.x_path(i), ensemble.y_path(i));
            let mut cum = vec![0.0; (n + 1) * dd];
            for k in 0..n {
                let (head, tail) = cum.split_at_mut((k + 1) * dd);
                tail[..dd].copy_from_slice(&head[k * dd..]);
                outer_increment(x, y, k, &mut tail[..dd]);
            }
            cum
        })
        .collect();
    let mut mean = vec![0.0; (n + 1) * dd];
    for c in &per_pair {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= np as f64);
    let to_matrix = |s: &[f64]| Matrix::from_row_major(d, d, s);
    let per_step: Vec<Matrix> = mean.chunks(dd).map(to_matrix).collect();
    let terminal = per_step[n].clone();
    let mut se = Matrix::zeros(d, d);
    if np > 1 {
        for c in &per_pair {
            for (e, v) in se.as_mut_slice().iter_mut().zip(&c[n * dd..]) {
                *e += v * v;
            }
        }
        for (e, m) in se.as_mut_slice().iter_mut().zip(terminal.as_slice()) {
            let var = (*e - np as f64 * m * m) / (np as f64 - 1.0);
            *e = (var.max(0.0) / np as f64).sqrt();
        }
    }
    let scale = 1.0 / (w as f64 * grid.dt());
    let windowed = (0..n / w)
        .map(|j| (&per_step[(j + 1) * w] - &per_step[j * w]).scale(scale))
        .collect();
    Ok(Covariation {
        window: w,
        per_step,
        terminal,
        terminal_stderr: se,
        windowed,
    })
}

/// Normalized windowed correlation `S_X^{−1/2} C S_Y^{−1/2}` of one pair,
/// where `S_X = Σ ΔX ΔXᵀ`, `S_Y = Σ ΔY ΔYᵀ`, `C = Σ ΔX ΔYᵀ` over each
/// window. Exactly orthogonal on windows where `ΔY = Q ΔX` with constant
/// `Q`, and always in `C^d`.
pub fn windowed_rho(x: PathView<'_>, y: PathView<'_>, window: usize) -> Result<Vec<Matrix>> {
    let d = x.dim();
    let n = x.len() - 1;
    let w = check_window(window, n)?;
    let mut out = Vec::with_capacity(n / w);
    for j in 0..n / w {
        let (mut sx, mut sy, mut c) = (vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d]);
        for k in j * w..(j + 1) * w {
            outer_increment(x, x, k, &mut sx);
            outer_increment(y, y, k, &mut sy);
            outer_increment(x, y, k, &mut c);
        }
        let wx = inverse_sqrt(&Matrix::from_row_major(d, d, &sx))?;
        let wy = inverse_sqrt(&Matrix::from_row_major(d, d, &sy))?;
        out.push(wx.matmul(&Matrix::from_row_major(d, d, &c)).matmul(&wy));
    }
    Ok(out)
}

/// Pseudo-inverse square root of a PSD matrix.
fn inverse_sqrt(s: &Matrix) -> Result<Matrix> {
    linalg::pseudoinverse(&linalg::psd_sqrt(s)?, DEFAULT_RANK_TOL)
}

/// Default certificate tolerance `3/√w + 0.05`.
pub fn default_certificate_tol(window: usize) -> f64 {
    3.0 / (window as f64).sqrt() + 0.05
}

/// Terminal realized covariation `Σ_k ΔX_k ΔY_kᵀ` of each pair, in pair order.
pub fn pathwise_covariation(ensemble: &CoupledEnsemble) -> Vec<Matrix> {
    let d = ensemble.dim();
    let n = ensemble.grid().n_steps();
    (0..ensemble.n_pairs())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (ensemble.x_path(i), ensemble.y_path(i));
            let mut m = Matrix::zeros(d, d);
            for k in 0..n {
                let (x0, x1, y0, y1) = (x.point(k), x.point(k + 1), y.point(k), y.point(k + 1));
                for a in 0..d {
                    for b in 0..d {
                        m[(a, b)] += (x1[a] - x0[a]) * (y1[b] - y0[b]);
                    }
                }
            }
            m
        })
        .collect()
}

/// Necessary condition for Monge couplings: the correlation process is
/// `O^d`-valued. Statistic: mean over pairs and windows of
/// `‖ρ̂ᵀρ̂ − Id‖_max` with `ρ̂` from [`windowed_rho`]. Passing does not
/// certify a Monge coupling (the Tanaka coupling passes).
pub fn monge_certificate(ensemble: &CoupledEnsemble, window: usize, tol: Option<f64>) -> Result<TestReport> {
    let n = ensemble.grid().n_steps();
    let w = check_window(window, n)?;
    let tol = tol.unwrap_or_else(|| default_certificate_tol(w));
    let d = ensemble.dim();
    let id = Matrix::identity(d);
    let per_pair: Vec<Result<(f64, usize)>> = (0..ensemble.n_pairs())
        .into_par_iter()
        .map(|i| {
            let rhos = windowed_rho(ensemble.x_path(i), ensemble.y_path(i), w)?;
            let s: f64 = rhos.iter().map(|r| (&r.transpose().matmul(r) - &id).max_abs()).sum();
            Ok((s, rhos.len()))
        })
        .collect();
    let (mut total, mut count) = (0.0, 0usize);
    for r in per_pair {
        let (s, c) = r?;
        total += s;
        count += c;
    }
    Ok(TestReport::new(
        "monge_certificate",
        total / count as f64,
        tol,
        Comparison::AtMost,
        (ensemble.n_pairs(), n, ensemble.seed()),
        json!({ "window": w, "windows": count }),
    ))
}

/// Heuristic probe of whether `Y` is a function of `X`: `k`-nearest-
/// neighbour classification of `sign(Y¹_1)` (with `sign(0) = −1`) from `X`
/// sampled at `t = j/8`, trained on the first half of the pairs and scored
/// on the second. Passes when out-of-sample accuracy reaches
/// [`ADAPTEDNESS_THRESHOLD`].
pub fn adaptedness_probe(ensemble: &CoupledEnsemble, k_neighbors: usize) -> Result<TestReport> {
    let np = ensemble.n_pairs();
    if np < ADAPTEDNESS_MIN_N {
        return Err(Error::Invalid(format!(
            "adaptedness probe needs N >= {ADAPTEDNESS_MIN_N}, got {np}"
        )));
    }
    let n = ensemble.grid().n_steps();
    if n < ADAPTEDNESS_POINTS {
        return Err(Error::Invalid(format!(
            "adaptedness probe needs at least {ADAPTEDNESS_POINTS} steps"
        )));
    }
    let half = np / 2;
    if k_neighbors == 0 || k_neighbors > half {
        return Err(Error::Invalid(format!("k_neighbors must lie in 1..={half}")));
    }
    let d = ensemble.dim();
    let steps: Vec<usize> = (1..=ADAPTEDNESS_POINTS).map(|j| j * n / ADAPTEDNESS_POINTS).collect();
    let features: Vec<Vec<f64>> = (0..np)
        .map(|i| {
            let x = ensemble.x_path(i);
            steps.iter().flat_map(|&k| x.point(k).to_vec()).collect()
        })
        .collect();
    let labels: Vec<bool> = (0..np).map(|i| ensemble.y_path(i).point(n)[0] > 0.0).collect();
    let (train, test) = features.split_at(half);
    let correct: usize = test
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            let mut dist: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(j, g)| (f.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum(), j))
                .collect();
            dist.select_nth_unstable_by(k_neighbors - 1, |a, b| a.partial_cmp(b).expect("finite"));
            let votes = dist[..k_neighbors].iter().filter(|(_, j)| labels[*j]).count();
            let predicted = 2 * votes > k_neighbors;
            usize::from(predicted == labels[half + t])
        })
        .sum();
    let accuracy = correct as f64 / test.len() as f64;
    Ok(TestReport::new(
        "adaptedness_probe",
        accuracy,
        ADAPTEDNESS_THRESHOLD,
        Comparison::AtLeast,
        (np, n, ensemble.seed()),
        json!({ "k_neighbors": k_neighbors, "features": steps.len() * d, "test_size": test.len() }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{self, ConstantCorrelation, ConstantRotation, StateAngleRotation};
    use crate::{presets, sde, TimeGrid};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(n).unwrap()
    }

    #[test]
    fn pathwise_covariation_matches_hand_sum() {
        let g = TimeGrid::new(2).unwrap();
        let x = vec![0.0, 0.0, 1.0, 2.0, 0.5, 1.5];
        let y = vec![0.0, 0.0, 2.0, -1.0, 2.0, 0.0];
        let e = CoupledEnsemble::from_values(g, 2, 1, 0, x, y, coupling::Provenance::new("t", Value::Null)).unwrap();
        let m = &pathwise_covariation(&e)[0];
        // Increments dx = (1, 2), (-0.5, -0.5); dy = (2, -1), (0, 1).
        assert_eq!(m.to_rows(), vec![vec![2.0, -1.5], vec![4.0, -2.5]]);
    }

    #[test]
    fn quantile_matches_tables() {
        assert!((normal_quantile(0.975) - 1.959_963_985).abs() < 1e-8);
        assert!((normal_quantile(0.995) - 2.575_829_304).abs() < 1e-8);
    }

    #[test]
    fn marginal_test_examples() {
        let g = grid(256);
        let bm = sde::sample_brownian(g, 2, 2000, 1).unwrap();
        let r = wiener_marginal_test(&bm, 0.01).unwrap();
        assert!(r.pass, "{r:?}");
        // 2 × (mean, variance, lag, terminal) + 1 cross.
        assert_eq!(r.details["z"].as_object().unwrap().len(), 9);
        let q = StateAngleRotation { dim: 2, rate: 2.0 };
        let y = coupling::rotation_monge(&q, &bm).unwrap().y_ensemble();
        assert!(wiener_marginal_test(&y, 0.01).unwrap().pass);
        let ou = sde::simulate(&presets::ou(1, 1.0, 0.0, 1.0, 0.0), g, 2000, 2).unwrap();
        let r = wiener_marginal_test(&ou, 0.01).unwrap();
        assert!(!r.pass, "{r:?}");
        let scaled = sde::simulate(&presets::constant(vec![0.0], vec![0.0], Matrix::from_diag(&[1.1])).unwrap(), g, 2000, 3).unwrap();
        assert!(!wiener_marginal_test(&scaled, 0.01).unwrap().pass);
        let drift = sde::simulate(&presets::constant(vec![0.0], vec![0.2], Matrix::identity(1)).unwrap(), g, 2000, 3).unwrap();
        assert!(!wiener_marginal_test(&drift, 0.01).unwrap().pass);
        assert!(wiener_marginal_test(&bm, 0.6).is_err());
    }

    #[test]
    fn marginal_test_detects_lag_and_cross_dependence() {
        let g = grid(128);
        // Correlated components: B² = 0.3 B¹ + √0.91 W.
        let rho = Matrix::from_rows(&[vec![1.0, 0.3], vec![0.0, 0.91f64.sqrt()]]).unwrap();
        let corr = sde::simulate(&presets::constant(vec![0.0; 2], vec![0.0; 2], rho.transpose()).unwrap(), g, 1000, 4).unwrap();
        let r = wiener_marginal_test(&corr, 0.01).unwrap();
        assert!(r.details["z"]["cross[0,1]"].as_f64().unwrap() > r.threshold, "{r:?}");
        // Moving-average increments have lag-1 correlation 1/2 after normalization.
        let base = sde::sample_brownian(grid(129), 1, 500, 5).unwrap();
        let mut v = Vec::new();
        for p in base.paths() {
            let mut acc = 0.0;
            v.push(0.0);
            for k in 0..128 {
                acc += (inc(p, k, 0) + inc(p, k + 1, 0)) / 2f64.sqrt();
                v.push(acc);
            }
        }
        let ma = PathEnsemble::from_values(g, 1, 500, 5, v).unwrap();
        let r = wiener_marginal_test(&ma, 0.01).unwrap();
        assert!(r.details["z"]["lag1[0]"].as_f64().unwrap() > r.threshold);
    }

    #[test]
    fn marginal_test_calibration() {
        let g = grid(32);
        let alpha = 0.05;
        let passes = (0..200)
            .filter(|&s| wiener_marginal_test(&sde::sample_brownian(g, 2, 100, s).unwrap(), alpha).unwrap().pass)
            .count();
        assert!(passes as f64 / 200.0 >= 1.0 - alpha - 0.02, "{passes}/200");
    }

    #[test]
    fn covariation_examples() {
        let g = grid(256);
        let bm = presets::brownian(2);
        let sync = coupling::synchronous(&bm, &bm, g, 2000, 1).unwrap();
        let c = realized_covariation(&sync, 64).unwrap();
        assert!((&c.terminal - &Matrix::identity(2)).max_abs() < 4.0 * c.terminal_stderr.max_abs() + 0.01);
        assert_eq!(c.per_step.len(), 257);
        assert_eq!(c.windowed.len(), 4);
        assert_eq!(c.per_step[0].max_abs(), 0.0);
        let anti = coupling::antithetic(&bm, &bm, g, 2000, 1).unwrap();
        let c = realized_covariation(&anti, 64).unwrap();
        assert!((&c.terminal + &Matrix::identity(2)).max_abs() < 4.0 * c.terminal_stderr.max_abs() + 0.01);
        let gb = grid(1 << 10);
        let e = coupling::couple_brownians(&ConstantCorrelation::scalar(1, 0.7), gb, 1, 10_000, 2).unwrap();
        let c = realized_covariation(&e, 64).unwrap();
        assert!((c.terminal[(0, 0)] - 0.7).abs() < 0.02);
        assert!(c.windowed.iter().all(|r| (r[(0, 0)] - 0.7).abs() < 0.05));
    }

    #[test]
    fn covariation_within_budget_for_d123() {
        let g = grid(256);
        for d in 1..=3 {
            let rho = if d == 1 {
                Matrix::from_diag(&[-0.6])
            } else {
                Matrix::embedded_rotation(d, 0.7).scale(0.8)
            };
            let e = coupling::couple_brownians(&ConstantCorrelation(rho.clone()), g, d, 4000, d as u64).unwrap();
            let c = realized_covariation(&e, 64).unwrap();
            for a in 0..d {
                for b in 0..d {
                    let err = (c.terminal[(a, b)] - rho[(a, b)]).abs();
                    assert!(err <= 3.0 * c.terminal_stderr[(a, b)] + 2.0 * g.dt().sqrt(), "d={d} ({a},{b}) {err}");
                }
            }
        }
    }

    #[test]
    fn windowed_rho_is_orthogonal_for_piecewise_constant_rotations() {
        let g = grid(256);
        let drv = sde::sample_brownian(g, 2, 3, 1).unwrap();
        let e = coupling::rotation_monge(&ConstantRotation(Matrix::rotation2(0.9)), &drv).unwrap();
        for (x, y) in e.pairs() {
            for r in windowed_rho(x, y, 64).unwrap() {
                assert!((&r - &Matrix::rotation2(0.9).transpose()).max_abs() < 1e-10);
            }
        }
    }

    #[test]
    fn windowed_rho_lies_in_correlation_class() {
        let g = grid(512);
        let e = coupling::couple_brownians(&ConstantCorrelation(Matrix::embedded_rotation(3, 0.4).scale(0.6)), g, 3, 50, 2).unwrap();
        let w = 64;
        for (x, y) in e.pairs() {
            for r in windowed_rho(x, y, w).unwrap() {
                assert!(linalg::is_correlation(&r, 3.0 / (w as f64).sqrt()).unwrap());
            }
        }
    }

    #[test]
    fn certificate_separation() {
        let g = grid(1 << 12);
        let n = 2000;
        let drv = sde::sample_brownian(g, 2, n, 3).unwrap();
        for q in [
            &ConstantRotation::reflection(2) as &dyn coupling::RotationProcess,
            &StateAngleRotation { dim: 2, rate: 1.0 },
        ] {
            let r = monge_certificate(&coupling::rotation_monge(q, &drv).unwrap(), 64, None).unwrap();
            assert!(r.pass, "{r:?}");
        }
        for c in [-0.7, 0.0, 0.5, 0.7] {
            let e = coupling::couple_brownians(&ConstantCorrelation::scalar(1, c), g, 1, n, 4).unwrap();
            let r = monge_certificate(&e, 64, None).unwrap();
            assert!(!r.pass, "c={c}: {r:?}");
        }
        let tanaka = coupling::tanaka_coupling(g, n, 5).unwrap();
        assert!(monge_certificate(&tanaka, 64, None).unwrap().pass);
    }

    #[test]
    fn certificate_separates_strong_correlation_at_tight_tolerance() {
        // With the default tol (0.425 at w = 64) |c| = 0.9 cannot fail since
        // 1 − c² = 0.19; the whitened estimator still separates it.
        let g = grid(1 << 12);
        let tol = 0.1;
        let e = coupling::couple_brownians(&ConstantCorrelation::scalar(1, 0.9), g, 1, 2000, 6).unwrap();
        assert!(!monge_certificate(&e, 64, Some(tol)).unwrap().pass);
        let drv = sde::sample_brownian(g, 2, 2000, 7).unwrap();
        let r = monge_certificate(&coupling::rotation_monge(&StateAngleRotation { dim: 2, rate: 1.0 }, &drv).unwrap(), 64, Some(tol)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn adaptedness_examples() {
        let g = grid(256);
        let n = 4000;
        let bm = presets::brownian(1);
        for e in [coupling::synchronous(&bm, &bm, g, n, 1).unwrap(), coupling::antithetic(&bm, &bm, g, n, 1).unwrap()] {
            let r = adaptedness_probe(&e, 15).unwrap();
            assert!(r.pass && r.statistic > 0.9, "{r:?}");
        }
        let t = adaptedness_probe(&coupling::tanaka_coupling(g, 10_000, 2).unwrap(), 15).unwrap();
        assert!(!t.pass && (t.statistic - 0.5).abs() < 0.05, "{t:?}");
        let small = coupling::synchronous(&bm, &bm, g, 999, 1).unwrap();
        assert!(adaptedness_probe(&small, 15).is_err());
    }

    #[test]
    fn jsonl_has_one_report_per_line() {
        let bm = sde::sample_brownian(grid(16), 1, 50, 1).unwrap();
        let r = wiener_marginal_test(&bm, 0.05).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&[r.clone(), r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["test"], "wiener_marginal");
        assert_eq!(v["comparison"], "<=");
        assert_eq!(v["N"], 50);
    }
}
