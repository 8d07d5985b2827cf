//! Small dense complex matrices.
//!
//! Everything here is sized for microphone-array work: `M ≤ 8` channels and
//! stacked WPE vectors of `M·K ≤ 64` entries. Storage is row-major and the hot
//! paths have `_into` variants that write into caller-owned buffers so the
//! per-frame code never allocates.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Pivot-ratio condition estimate above which a solve is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Row-major complex matrix with fixed dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn col_vector(v: &[C64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn diag(d: &[C64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m.data[i * d.len() + i] = x;
        }
        m
    }

    /// `a bᴴ` for column vectors given as slices.
    pub fn outer(a: &[C64], b: &[C64]) -> Self {
        Self::from_fn(a.len(), b.len(), |r, c| a[r] * b[c].conj())
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, v: &[C64]) {
        assert_eq!(v.len(), self.rows);
        for (r, &x) in v.iter().enumerate() {
            self[(r, c)] = x;
        }
    }

    pub fn fill(&mut self, value: C64) {
        self.data.fill(value);
    }

    pub fn copy_from(&mut self, other: &CMat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.copy_from_slice(&other.data);
    }

    pub fn set_identity(&mut self) {
        assert!(self.is_square());
        self.data.fill(ZERO);
        for i in 0..self.rows {
            self.data[i * self.cols + i] = ONE;
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn matmul(&self, rhs: &CMat) -> Self {
        let mut out = Self::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        out
    }

    /// `self · v` for a column vector given as a slice.
    pub fn mul_vec(&self, v: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    pub fn mul_vec_into(&self, v: &[C64], out: &mut [C64]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn scale_mut(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add(&self, rhs: &CMat) -> Self {
        let mut out = self.clone();
        out.add_assign(rhs);
        out
    }

    pub fn sub(&self, rhs: &CMat) -> Self {
        self.check_same_shape(rhs);
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add_assign(&mut self, rhs: &CMat) {
        self.check_same_shape(rhs);
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    /// `self += s · rhs`
    pub fn axpy(&mut self, s: f64, rhs: &CMat) {
        self.check_same_shape(rhs);
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b * s;
        }
    }

    /// `self += a bᴴ`
    pub fn add_outer(&mut self, a: &[C64], b: &[C64]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (r, ar) in a.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, bc) in row.iter_mut().zip(b) {
                *x += ar * bc.conj();
            }
        }
    }

    pub fn trace(&self) -> C64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// Mean magnitude of the diagonal; the reference level for relative loading.
    pub fn mean_abs_diag(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.data[i * self.cols + i].norm()).sum::<f64>() / self.rows as f64
    }

    /// `(A + Aᴴ) / 2`
    pub fn hermitianize(&self) -> Self {
        let mut out = self.clone();
        out.hermitianize_mut();
        out
    }

    pub fn hermitianize_mut(&mut self) {
        assert!(self.is_square(), "hermitianize needs a square matrix");
        let n = self.rows;
        for r in 0..n {
            let d = self.data[r * n + r];
            self.data[r * n + r] = C64::new(d.re, 0.0);
            for c in r + 1..n {
                let avg = (self.data[r * n + c] + self.data[c * n + r].conj()) * 0.5;
                self.data[r * n + c] = avg;
                self.data[c * n + r] = avg.conj();
            }
        }
    }

    /// Largest entry of `|A − Aᴴ|`.
    pub fn hermitian_defect(&self) -> f64 {
        assert!(self.is_square());
        let n = self.rows;
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in r..n {
                worst = worst.max((self.data[r * n + c] - self.data[c * n + r].conj()).norm());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.re.is_finite() && x.im.is_finite())
    }

    /// Inverse with relative diagonal loading.
    pub fn inverse(&self, loading: f64) -> Result<Self> {
        herm_solve(self, &Self::identity(self.rows), loading)
    }

    fn check_same_shape(&self, rhs: &CMat) {
        assert_eq!(
            (self.rows, self.cols),
            (rhs.rows, rhs.cols),
            "matrix shapes differ"
        );
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `out = a · b`
pub fn matmul_into(a: &CMat, b: &CMat, out: &mut CMat) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((out.rows, out.cols), (a.rows, b.cols), "output shape");
    out.data.fill(ZERO);
    for r in 0..a.rows {
        let orow = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[r * a.cols + k];
            if aik == ZERO {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// `aᴴ b` for vectors.
#[inline]
pub fn dot_h(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Scratch space for allocation-free solves.
#[derive(Clone, Debug)]
pub struct SolveWorkspace {
    n: usize,
    lu: Vec<C64>,
}

impl SolveWorkspace {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            lu: vec![ZERO; n * n],
        }
    }
}

/// Solves `(A + loading·mean|diag A|·I) X = B`.
///
/// Gaussian elimination with partial pivoting. `A` is expected to be
/// Hermitian but only squareness is required.
pub fn herm_solve(a: &CMat, b: &CMat, loading: f64) -> Result<CMat> {
    let mut ws = SolveWorkspace::new(a.rows);
    let mut out = b.clone();
    herm_solve_into(a, b, loading, &mut ws, &mut out)?;
    Ok(out)
}

/// Allocation-free form of [`herm_solve`]; `out` receives `X`.
pub fn herm_solve_into(
    a: &CMat,
    b: &CMat,
    loading: f64,
    ws: &mut SolveWorkspace,
    out: &mut CMat,
) -> Result<()> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "solve needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if b.rows != a.rows || out.rows != b.rows || out.cols != b.cols || ws.n != a.rows {
        return Err(Error::DimensionMismatch(format!(
            "solve of {}x{} against {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    debug_assert!(loading >= 0.0);
    let n = a.rows;
    ws.lu.copy_from_slice(&a.data);
    if loading > 0.0 {
        let level = loading * a.mean_abs_diag();
        for i in 0..n {
            ws.lu[i * n + i] += level;
        }
    }
    out.data.copy_from_slice(&b.data);
    let condition = lu_solve_in_place(&mut ws.lu, n, &mut out.data, b.cols);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularMatrix { condition });
    }
    Ok(())
}

/// In-place elimination of `[lu | rhs]`; returns a pivot-ratio condition
/// estimate (infinite when a zero pivot is met).
fn lu_solve_in_place(lu: &mut [C64], n: usize, rhs: &mut [C64], nrhs: usize) -> f64 {
    let mut max_pivot = 0.0f64;
    let mut min_pivot = f64::INFINITY;
    for k in 0..n {
        let mut p = k;
        let mut best = lu[k * n + k].norm();
        for r in k + 1..n {
            let v = lu[r * n + k].norm();
            if v > best {
                best = v;
                p = r;
            }
        }
        if !(best > 0.0) || !best.is_finite() {
            return f64::INFINITY;
        }
        max_pivot = max_pivot.max(best);
        min_pivot = min_pivot.min(best);
        if p != k {
            for c in 0..n {
                lu.swap(k * n + c, p * n + c);
            }
            for c in 0..nrhs {
                rhs.swap(k * nrhs + c, p * nrhs + c);
            }
        }
        let inv = lu[k * n + k].inv();
        for r in k + 1..n {
            let factor = lu[r * n + k] * inv;
            if factor == ZERO {
                continue;
            }
            lu[r * n + k] = ZERO;
            for c in k + 1..n {
                let v = lu[k * n + c];
                lu[r * n + c] -= factor * v;
            }
            for c in 0..nrhs {
                let v = rhs[k * nrhs + c];
                rhs[r * nrhs + c] -= factor * v;
            }
        }
    }
    for k in (0..n).rev() {
        let inv = lu[k * n + k].inv();
        for c in 0..nrhs {
            let mut acc = rhs[k * nrhs + c];
            for j in k + 1..n {
                acc -= lu[k * n + j] * rhs[j * nrhs + c];
            }
            rhs[k * nrhs + c] = acc * inv;
        }
    }
    max_pivot / min_pivot
}

/// `log |det A|` via partial-pivot elimination; `-inf` for singular input.
pub fn log_abs_det(a: &CMat) -> f64 {
    assert!(a.is_square());
    let n = a.rows;
    let mut lu = a.data.clone();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&x, &y| lu[x * n + k].norm().total_cmp(&lu[y * n + k].norm()))
            .unwrap();
        let piv = lu[p * n + k];
        if piv.norm() == 0.0 {
            return f64::NEG_INFINITY;
        }
        if p != k {
            for c in 0..n {
                lu.swap(k * n + c, p * n + c);
            }
        }
        acc += piv.norm().ln();
        let inv = piv.inv();
        for r in k + 1..n {
            let factor = lu[r * n + k] * inv;
            for c in k + 1..n {
                let v = lu[k * n + c];
                lu[r * n + c] -= factor * v;
            }
        }
    }
    acc
}
