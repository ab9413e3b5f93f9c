//! Small dense matrix kernel.
//!
//! Everything here targets the `d ≤ 8` regime of the path-space
//! constructors: a row-major [`Matrix`] with inline storage, a one-sided
//! Jacobi SVD, a cyclic Jacobi symmetric eigensolver, and the derived
//! operations (pseudoinverse, projections, matrix-class membership tests,
//! trace-maximizing rotation, PSD square root).

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Relative threshold below which singular values count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Eigenvalues of a PSD input above `-PSD_CLAMP` are clamped to zero.
pub const PSD_CLAMP: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-8;
const MAX_SWEEPS: usize = 80;

/// Dense row-major real matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: SmallVec<[f64; 16]>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: SmallVec::from_elem(0.0, rows * cols),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d, d);
        for i in 0..d {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data has wrong length");
        Self {
            rows,
            cols,
            data: SmallVec::from_slice(data),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 {
            return Err(Error::dimension("matrix must be non-empty"));
        }
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dimension("ragged matrix rows"));
        }
        let data: SmallVec<[f64; 16]> = rows.iter().flatten().copied().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("matrix entries must be finite"));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    /// Plane rotation by `angle` in dimension 2.
    pub fn rotation2(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_row_major(2, 2, &[c, -s, s, c])
    }

    /// `d × d` identity with the leading 2×2 block replaced by a rotation.
    pub fn embedded_rotation(d: usize, angle: f64) -> Self {
        let mut m = Self::identity(d);
        if d >= 2 {
            let (s, c) = angle.sin_cos();
            m[(0, 0)] = c;
            m[(0, 1)] = -s;
            m[(1, 0)] = s;
            m[(1, 1)] = c;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        out
    }

    /// `out = self · x`.
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut out);
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|v| *v *= s);
        m
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_square(&self, op: &str) -> Result<usize> {
        if self.is_square() && self.rows > 0 {
            Ok(self.rows)
        } else {
            Err(Error::dimension(format!(
                "{op} requires a non-empty square matrix, got {}x{}",
                self.rows, self.cols
            )))
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let mut m = self.clone();
        m.data.iter_mut().zip(&rhs.data).for_each(|(a, b)| *a += b);
        m
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let mut m = self.clone();
        m.data.iter_mut().zip(&rhs.data).for_each(|(a, b)| *a -= b);
        m
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs)
    }
}

impl Neg for &Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

/// `A = U · diag(S) · Vᵀ` with `S` descending.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let d = self.s.len();
        let mut us = self.u.clone();
        for i in 0..d {
            for j in 0..d {
                us[(i, j)] *= self.s[j];
            }
        }
        us.matmul(&self.v.transpose())
    }

    /// Number of singular values above `rank_tol · S_max`.
    pub fn rank(&self, rank_tol: f64) -> usize {
        let cutoff = rank_tol * self.s.first().copied().unwrap_or(0.0);
        self.s.iter().filter(|&&s| s > cutoff).count()
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Output is deterministic: singular values descend, and the first entry
/// of each column of `U` whose magnitude exceeds `1e-12` is nonnegative
/// (the matching column of `V` is flipped with it).
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let d = a.require_square("svd")?;
    if !a.is_finite() {
        return Err(Error::domain("svd input contains non-finite entries"));
    }
    // Columns of `w` converge to U·S.
    let mut w = a.clone();
    let mut v = Matrix::identity(d);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..d {
                    let (wp, wq) = (w[(i, p)], w[(i, q)]);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..d {
                    let (wp, wq) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                    let (vp, vq) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..d)
        .map(|j| (0..d).map(|i| w[(i, j)] * w[(i, j)]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    // Stable sort keeps ties in column order, so the output is reproducible.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let s_max = s[0];
    let mut u = Matrix::zeros(d, d);
    let mut v_sorted = Matrix::zeros(d, d);
    let mut filled = vec![false; d];
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..d {
            v_sorted[(i, new_j)] = v[(i, old_j)];
        }
        let sj = s[new_j];
        if sj > 0.0 && sj > f64::EPSILON * s_max * d as f64 {
            for i in 0..d {
                u[(i, new_j)] = w[(i, old_j)] / sj;
            }
            filled[new_j] = true;
        }
    }
    complete_orthonormal(&mut u, &filled);

    for j in 0..d {
        let lead = (0..d).map(|i| u[(i, j)]).find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..d {
                u[(i, j)] = -u[(i, j)];
                v_sorted[(i, j)] = -v_sorted[(i, j)];
            }
        }
    }

    Ok(SvdResult { u, s, v: v_sorted })
}

/// Fills the columns of `u` not marked `filled` with an orthonormal
/// completion drawn from the standard basis (modified Gram-Schmidt, twice).
fn complete_orthonormal(u: &mut Matrix, filled: &[bool]) {
    let d = u.rows();
    let mut have: Vec<usize> = (0..d).filter(|&j| filled[j]).collect();
    for j in (0..d).filter(|&j| !filled[j]) {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..d {
            let mut x = vec![0.0; d];
            x[e] = 1.0;
            for _ in 0..2 {
                for &k in &have {
                    let dot: f64 = (0..d).map(|i| u[(i, k)] * x[i]).sum();
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi -= dot * u[(i, k)];
                    }
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(n, _)| norm > *n + 1e-12) {
                best = Some((norm, x));
            }
        }
        let (norm, x) = best.expect("d >= 1");
        for i in 0..d {
            u[(i, j)] = x[i] / norm;
        }
        have.push(j);
    }
}

/// Moore–Penrose pseudoinverse; singular values `≤ rank_tol · S_max` are
/// treated as zero.
pub fn pseudoinverse(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    let f = svd(a)?;
    let d = f.s.len();
    let cutoff = rank_tol * f.s[0];
    let mut vs = f.v.clone();
    for j in 0..d {
        let inv = if f.s[j] > cutoff && f.s[j] > 0.0 {
            1.0 / f.s[j]
        } else {
            0.0
        };
        for i in 0..d {
            vs[(i, j)] *= inv;
        }
    }
    Ok(vs.matmul(&f.u.transpose()))
}

/// Inverse of a square matrix, failing when it is numerically singular.
pub fn inverse(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    let f = svd(a)?;
    if f.rank(rank_tol) < f.s.len() || f.s[0] == 0.0 {
        return Err(Error::Singular {
            step: None,
            context: "matrix inverse".into(),
        });
    }
    pseudoinverse(a, rank_tol)
}

/// Orthogonal projection `A†A` onto the orthogonal complement of `Ker A`.
pub fn projection_range(a: &Matrix) -> Result<Matrix> {
    Ok(pseudoinverse(a, DEFAULT_RANK_TOL)?.matmul(a))
}

/// Orthogonal projection `Id − A†A` onto `Ker A`, assembled from the null
/// right-singular vectors. Exactly zero when `A` has full numerical rank.
pub fn kernel_projection(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    let f = svd(a)?;
    let d = f.s.len();
    let r = f.rank(rank_tol);
    let mut p = Matrix::zeros(d, d);
    for j in r..d {
        for i in 0..d {
            for l in 0..d {
                p[(i, l)] += f.v[(i, j)] * f.v[(l, j)];
            }
        }
    }
    Ok(p)
}

/// `d` minus the numerical rank.
pub fn kernel_dim(a: &Matrix, rank_tol: f64) -> Result<usize> {
    let f = svd(a)?;
    Ok(f.s.len() - f.rank(rank_tol))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order with eigenvectors as the
/// matching columns. Only the symmetric part of the input is used.
pub fn sym_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let d = a.require_square("sym_eigen")?;
    let mut m = a.clone();
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut vecs = Matrix::identity(d);
    let scale = m.max_abs();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= (f64::EPSILON * scale).powi(2) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (vecs[(k, p)], vecs[(k, q)]);
                    vecs[(k, p)] = c * vkp - s * vkq;
                    vecs[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let vals = order.iter().map(|&i| m[(i, i)]).collect();
    let mut sorted = Matrix::zeros(d, d);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..d {
            sorted[(i, new_j)] = vecs[(i, old_j)];
        }
    }
    Ok((vals, sorted))
}

/// Minimum eigenvalue of `[[Id, C], [Cᵀ, Id]]`; nonnegative iff `C ∈ C^d`.
pub fn correlation_margin(c: &Matrix) -> Result<f64> {
    let d = c.require_square("correlation_margin")?;
    let mut block = Matrix::identity(2 * d);
    for i in 0..d {
        for j in 0..d {
            block[(i, d + j)] = c[(i, j)];
            block[(d + j, i)] = c[(i, j)];
        }
    }
    let (vals, _) = sym_eigen(&block)?;
    Ok(vals[0])
}

pub fn is_correlation(c: &Matrix, tol: f64) -> Result<bool> {
    Ok(correlation_margin(c)? >= -tol)
}

pub fn is_orthogonal(q: &Matrix, tol: f64) -> Result<bool> {
    let d = q.require_square("is_orthogonal")?;
    // Entries of QᵀQ − Id, column pairs at a time; runs once per step.
    let c = q.as_slice();
    for i in 0..d {
        for j in i..d {
            let dot: f64 = (0..d).map(|k| c[k * d + i] * c[k * d + j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if !((dot - want).abs() <= tol) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Rotation `Q* = V·Uᵀ` maximizing `Tr(A·C)` over orthogonal `C`, and the
/// attained value `Σ S_i`.
pub fn trace_max_rotation(a: &Matrix) -> Result<(Matrix, f64)> {
    let f = svd(a)?;
    let q = f.v.matmul(&f.u.transpose());
    Ok((q, f.s.iter().sum()))
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(a: &Matrix) -> Result<Matrix> {
    let d = a.require_square("psd_sqrt")?;
    let scale = a.max_abs().max(1.0);
    let asym = (a - &a.transpose()).max_abs();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::domain(format!(
            "psd_sqrt input is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    let (vals, vecs) = sym_eigen(a)?;
    if vals[0] < -PSD_CLAMP * scale {
        return Err(Error::domain(format!(
            "psd_sqrt input has negative eigenvalue {:.3e}",
            vals[0]
        )));
    }
    let mut scaled = vecs.clone();
    for j in 0..d {
        let r = vals[j].max(0.0).sqrt();
        for i in 0..d {
            scaled[(i, j)] *= r;
        }
    }
    Ok(scaled.matmul(&vecs.transpose()))
}
