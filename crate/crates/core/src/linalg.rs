//! Dense row-major matrices, vector helpers and the few spectral routines the
//! rest of the crate needs (power iteration, partial-pivot LU).

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has length {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat { rows: rows.len(), cols, data })
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = v;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    /// Column vector view of a slice.
    pub fn column(v: &[f64]) -> Self {
        Mat { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        for (i, &x) in v.iter().enumerate() {
            self.set(i, j, x);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `M x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| vecops::dot(self.row(i), x)).collect()
    }

    /// `Mᵀ x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                vecops::axpy(&mut out, xi, self.row(i));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    vecops::axpy(out.row_mut(i), a, other.row(k));
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| alpha * x).collect() }
    }

    fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Mat { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius(&self) -> f64 {
        vecops::norm(&self.data)
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// `[self | other]`
    pub fn hcat(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!("hcat rows {} vs {}", self.rows, other.rows)));
        }
        let mut out = Mat::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out.row_mut(i)[self.cols..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat { rows: idx.len(), cols: self.cols, data }
    }

    /// `XᵀX / scale`
    pub fn gram(&self, scale: f64) -> Mat {
        let d = self.cols;
        let mut g = Mat::zeros(d, d);
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..d {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                let grow = &mut g.data[a * d..(a + 1) * d];
                for b in a..d {
                    grow[b] += ra * r[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = g.data[a * d + b] / scale;
                g.data[a * d + b] = v;
                g.data[b * d + a] = v;
            }
        }
        g
    }
}

/// Free functions over `&[f64]` vectors.
pub mod vecops {
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[inline]
    pub fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn norm_inf(a: &[f64]) -> f64 {
        a.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `y += alpha * x`
    #[inline]
    pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
        debug_assert_eq!(y.len(), x.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    pub fn scale(a: &[f64], alpha: f64) -> Vec<f64> {
        a.iter().map(|x| alpha * x).collect()
    }

    pub fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    pub fn all_finite(a: &[f64]) -> bool {
        a.iter().all(|x| x.is_finite())
    }
}

const POWER_MAX_ITERS: usize = 200_000;

/// Largest eigenvalue of a symmetric PSD operator by power iteration.
///
/// Stops once the eigen-residual `‖Bx − ρx‖` drops below `tol·max(1, ρ)`; a
/// small residual certifies that `ρ` lies within that distance of the
/// spectrum. Starts from the normalized all-ones vector and falls back to
/// other fixed starts if the iteration collapses onto the kernel.
fn power_top(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64>, tol: f64) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    let starts = (0..=dim).map(|s| {
        let mut x: Vec<f64> = match s {
            0 => vec![1.0; dim],
            // alternating signs, then a sweep of unit vectors
            1 => (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            s => {
                let mut e = vec![0.0; dim];
                e[s - 2] = 1.0;
                e
            }
        };
        let n = vecops::norm(&x);
        x.iter_mut().for_each(|v| *v /= n);
        x
    });
    for mut x in starts {
        let mut rho = 0.0;
        let mut collapsed = false;
        for _ in 0..POWER_MAX_ITERS {
            let bx = apply(&x);
            rho = vecops::dot(&x, &bx);
            let nb = vecops::norm(&bx);
            if nb == 0.0 {
                collapsed = true;
                break;
            }
            let res: f64 = bx.iter().zip(&x).map(|(b, xi)| (b - rho * xi).powi(2)).sum::<f64>().sqrt();
            x = bx.iter().map(|b| b / nb).collect();
            if res <= tol * rho.max(1.0) {
                break;
            }
        }
        if !collapsed {
            return rho.max(0.0);
        }
    }
    0.0
}

/// Operator 2-norm via power iteration on `MᵀM`.
pub fn spectral_norm(m: &Mat, tol: f64) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::NonFiniteMatrix);
    }
    if tol <= 0.0 {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    if m.data.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    // Work on the smaller Gram side.
    let (small, big) = if m.rows <= m.cols { (m.rows, true) } else { (m.cols, false) };
    let gram_apply = |x: &[f64]| -> Vec<f64> {
        if big {
            m.matvec(&m.matvec_t(x))
        } else {
            m.matvec_t(&m.matvec(x))
        }
    };
    // residual tolerance on σ² so that σ is within tol·max(1, σ)
    let rho = power_top(small, gram_apply, tol * 1e-2);
    Ok(rho.sqrt())
}

/// Partial-pivot LU factorization.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

const PIVOT_EPS: f64 = 1e-12;

impl Lu {
    pub fn factor(a: &Mat) -> Result<Lu> {
        if a.rows != a.cols {
            return Err(Error::Shape(format!("LU needs a square matrix, got {:?}", a.shape())));
        }
        if !a.is_finite() {
            return Err(Error::NonFiniteMatrix);
        }
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = vecops::norm_inf(&a.data).max(1.0);
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if pmax <= PIVOT_EPS * scale {
                return Err(Error::Singular { pivot: k });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / piv;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        crate::error::check_len("right-hand side", b.len(), n)?;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        Ok(x)
    }
}

/// Solves `Ax = b` by partial-pivot LU.
pub fn solve_dense(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    Lu::factor(a)?.solve(b)
}

/// Largest and smallest eigenvalues `(L, μ)` of `n⁻¹XᵀX`, both clamped at 0.
pub fn extreme_eigs_gram(x: &Mat) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(Error::NonFiniteMatrix);
    }
    if x.rows == 0 || x.cols == 0 {
        return Err(Error::InvalidArgument("empty design matrix".into()));
    }
    let g = x.gram(x.rows as f64);
    let d = g.rows;
    let tol = 1e-10;
    let l = power_top(d, |v| g.matvec(v), tol).max(0.0);
    let shifted = power_top(
        d,
        |v| {
            let gv = g.matvec(v);
            v.iter().zip(gv).map(|(vi, gi)| l * vi - gi).collect()
        },
        tol,
    );
    let mu = (l - shifted).clamp(0.0, l);
    Ok((l, mu))
}
