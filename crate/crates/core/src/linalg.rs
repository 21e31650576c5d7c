//! Small dense matrices over `f64` and `Complex64`.
//!
//! Everything here is sized for coefficient tableaus (s ≤ 4) and the
//! stability matrices built from them. Large semi-discrete systems never go
//! through `Matrix`; they use the structured Jacobians in `integrator`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, MulAssign, Neg, Sub, SubAssign};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Pivot threshold relative to `‖A‖_∞` below which LU declares singularity.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-14;

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_real(x: f64) -> Self;
    fn modulus(self) -> f64;
    fn is_finite(self) -> bool;
    fn to_complex(self) -> Complex64;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_real(x: f64) -> Self {
        x
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn to_complex(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn to_complex(self) -> Complex64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type RealMatrix = Matrix<f64>;
pub type ComplexMatrix = Matrix<Complex64>;

impl<T: Scalar> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dims(
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn column(values: &[T]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, alpha: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * alpha).collect(),
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_complex(&self) -> ComplexMatrix {
        self.map(T::to_complex)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dims(
                format!("{} rows", self.cols),
                format!("{} rows", other.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.modulus()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.modulus().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.modulus()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).fold(T::zero(), |acc, i| acc + self[(i, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Scalar> Add for &Matrix<T> {
    type Output = Matrix<T>;
    fn add(self, rhs: Self) -> Matrix<T> {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl<T: Scalar> Sub for &Matrix<T> {
    type Output = Matrix<T>;
    fn sub(self, rhs: Self) -> Matrix<T> {
        self.zip_with(rhs, |a, b| a - b)
    }
}

/// Panics on shape mismatch; use [`Matrix::matmul`] for a checked product.
impl<T: Scalar> Mul for &Matrix<T> {
    type Output = Matrix<T>;
    fn mul(self, rhs: Self) -> Matrix<T> {
        self.matmul(rhs).expect("matrix shapes must agree")
    }
}

/// LU factorization with partial pivoting, `P·A = L·U`.
#[derive(Debug, Clone)]
pub struct Lu<T: Scalar> {
    lu: Matrix<T>,
    perm: Vec<usize>,
    swaps: usize,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims(
                "square matrix",
                format!("{}x{}", a.rows, a.cols),
            ));
        }
        let n = a.rows;
        let threshold = SINGULAR_PIVOT_RTOL * a.norm_inf();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for k in 0..n {
            let (p, pivot) =
                (k..n)
                    .map(|i| (i, lu[(i, k)].modulus()))
                    .fold(
                        (k, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if !(pivot > threshold) || pivot == 0.0 {
                return Err(Error::SingularMatrix { pivot, threshold });
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                swaps += 1;
            }
            let d = lu[(k, k)];
            for i in k + 1..n {
                let l = lu[(i, k)] / d;
                lu[(i, k)] = l;
                if l != T::zero() {
                    for j in k + 1..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= l * u;
                    }
                }
            }
        }
        Ok(Self { lu, perm, swaps })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn solve_vec(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc / self.lu[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        if b.rows != self.dim() {
            return Err(Error::dims(
                format!("{} rows", self.dim()),
                format!("{} rows", b.rows),
            ));
        }
        let mut out = Matrix::zeros(b.rows, b.cols);
        let mut col = vec![T::zero(); b.rows];
        for j in 0..b.cols {
            for i in 0..b.rows {
                col[i] = b[(i, j)];
            }
            let x = self.solve_vec(&col);
            for i in 0..b.rows {
                out[(i, j)] = x[i];
            }
        }
        Ok(out)
    }

    pub fn determinant(&self) -> T {
        let mut d = (0..self.dim()).fold(T::one(), |acc, i| acc * self.lu[(i, i)]);
        if self.swaps % 2 == 1 {
            d = -d;
        }
        d
    }
}

/// Solves `A·X = B`.
pub fn lu_solve<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    Lu::factor(a)?.solve(b)
}

pub fn inverse<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    lu_solve(a, &Matrix::identity(a.rows))
}

/// All eigenvalues (with multiplicity) of a square matrix.
///
/// Householder reduction to upper Hessenberg form followed by complex
/// single-shift QR with Wilkinson shifts and deflation.
pub fn eigenvalues<T: Scalar>(a: &Matrix<T>) -> Result<Vec<Complex64>> {
    if !a.is_square() {
        return Err(Error::dims(
            "square matrix",
            format!("{}x{}", a.rows, a.cols),
        ));
    }
    let mut h = a.to_complex();
    hessenberg_in_place(&mut h);
    hessenberg_qr_eigenvalues(h)
}

pub fn spectral_radius<T: Scalar>(a: &Matrix<T>) -> Result<f64> {
    Ok(eigenvalues(a)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

fn hessenberg_in_place(h: &mut ComplexMatrix) {
    let n = h.rows;
    if n < 3 {
        return;
    }
    for k in 0..n - 2 {
        let norm = (k + 1..n).map(|i| h[(i, k)].norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = h[(k + 1, k)];
        let phase = if x0.norm() == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            x0 / x0.norm()
        };
        let mut v: Vec<Complex64> = (k + 1..n).map(|i| h[(i, k)]).collect();
        v[0] += phase * norm;
        let vnorm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for z in &mut v {
            *z /= vnorm;
        }
        // H <- (I - 2vv*) H
        for j in 0..n {
            let dot: Complex64 = v
                .iter()
                .enumerate()
                .map(|(idx, vi)| vi.conj() * h[(k + 1 + idx, j)])
                .sum();
            for (idx, vi) in v.iter().enumerate() {
                h[(k + 1 + idx, j)] -= *vi * dot * 2.0;
            }
        }
        // H <- H (I - 2vv*)
        for i in 0..n {
            let dot: Complex64 = v
                .iter()
                .enumerate()
                .map(|(idx, vi)| h[(i, k + 1 + idx)] * *vi)
                .sum();
            for (idx, vi) in v.iter().enumerate() {
                h[(i, k + 1 + idx)] -= dot * vi.conj() * 2.0;
            }
        }
        for i in k + 2..n {
            h[(i, k)] = Complex64::new(0.0, 0.0);
        }
    }
}

fn eig2x2(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> (Complex64, Complex64) {
    let mean = (a + d) * 0.5;
    let disc = (((a - d) * 0.5).powi(2) + b * c).sqrt();
    let plus = mean + disc;
    let minus = mean - disc;
    let l1 = if plus.norm() >= minus.norm() {
        plus
    } else {
        minus
    };
    let det = a * d - b * c;
    let l2 = if l1.norm() > 0.0 {
        det / l1
    } else {
        mean - (l1 - mean)
    };
    (l1, l2)
}

fn hessenberg_qr_eigenvalues(mut h: ComplexMatrix) -> Result<Vec<Complex64>> {
    let n = h.rows;
    let mut eig = Vec::with_capacity(n);
    if n == 0 {
        return Ok(eig);
    }
    let budget = 30 * n * n.max(2);
    let mut total = 0usize;
    let mut since_deflation = 0usize;
    let mut hi = n - 1;
    loop {
        if hi == 0 {
            eig.push(h[(0, 0)]);
            break;
        }
        let mut l = hi;
        while l > 0 {
            let sub = h[(l, l - 1)].norm();
            let scale = h[(l - 1, l - 1)].norm() + h[(l, l)].norm();
            if sub <= f64::EPSILON * scale || sub < f64::MIN_POSITIVE {
                h[(l, l - 1)] = Complex64::new(0.0, 0.0);
                break;
            }
            l -= 1;
        }
        if l == hi {
            eig.push(h[(hi, hi)]);
            hi -= 1;
            since_deflation = 0;
            continue;
        }
        if l + 1 == hi {
            let (l1, l2) = eig2x2(h[(l, l)], h[(l, hi)], h[(hi, l)], h[(hi, hi)]);
            eig.push(l1);
            eig.push(l2);
            if l == 0 {
                break;
            }
            hi = l - 1;
            since_deflation = 0;
            continue;
        }
        total += 1;
        since_deflation += 1;
        if total > budget {
            return Err(Error::EigenNoConvergence { iterations: total });
        }
        let shift = if since_deflation % 11 == 10 {
            // exceptional shift to break cycles
            h[(hi, hi)] + Complex64::new(0.75 * h[(hi, hi - 1)].norm(), 0.0)
        } else {
            let (l1, l2) = eig2x2(
                h[(hi - 1, hi - 1)],
                h[(hi - 1, hi)],
                h[(hi, hi - 1)],
                h[(hi, hi)],
            );
            if (l1 - h[(hi, hi)]).norm() <= (l2 - h[(hi, hi)]).norm() {
                l1
            } else {
                l2
            }
        };
        qr_sweep(&mut h, l, hi, shift);
    }
    if eig.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("eigenvalues".into()));
    }
    Ok(eig)
}

/// One explicitly shifted QR step on the active window `lo..=hi`.
fn qr_sweep(h: &mut ComplexMatrix, lo: usize, hi: usize, shift: Complex64) {
    for k in lo..=hi {
        h[(k, k)] -= shift;
    }
    let mut rotations = Vec::with_capacity(hi - lo);
    for k in lo..hi {
        let a = h[(k, k)];
        let b = h[(k + 1, k)];
        let r = (a.norm_sqr() + b.norm_sqr()).sqrt();
        let (c, s) = if r == 0.0 {
            (1.0, Complex64::new(0.0, 0.0))
        } else if a.norm() == 0.0 {
            (0.0, b.conj() / b.norm())
        } else {
            let alpha = a / a.norm();
            (a.norm() / r, alpha * b.conj() / r)
        };
        for j in k..=hi {
            let x = h[(k, j)];
            let y = h[(k + 1, j)];
            h[(k, j)] = x * c + s * y;
            h[(k + 1, j)] = -s.conj() * x + y * c;
        }
        rotations.push((c, s));
    }
    for (offset, &(c, s)) in rotations.iter().enumerate() {
        let k = lo + offset;
        for i in lo..=(k + 1).min(hi) {
            let x = h[(i, k)];
            let y = h[(i, k + 1)];
            h[(i, k)] = x * c + y * s.conj();
            h[(i, k + 1)] = -x * s + y * c;
        }
    }
    for k in lo..=hi {
        h[(k, k)] += shift;
    }
}

/// Numerical null space of a real matrix by Gaussian elimination with full
/// pivoting. Pivots below `rel_tol · max|a_ij|` count as zero. Returns the
/// rank and a basis of the null space.
pub fn null_space(a: &RealMatrix, rel_tol: f64) -> (usize, Vec<Vec<f64>>) {
    let (m, n) = (a.rows, a.cols);
    let mut u = a.clone();
    let mut col_perm: Vec<usize> = (0..n).collect();
    let threshold = rel_tol * a.max_abs().max(f64::MIN_POSITIVE);
    let mut rank = 0;
    for k in 0..m.min(n) {
        let mut best = (k, k, 0.0);
        for i in k..m {
            for j in k..n {
                let v = u[(i, j)].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if best.2 <= threshold {
            break;
        }
        let (pi, pj, _) = best;
        if pi != k {
            for j in 0..n {
                u.data.swap(k * n + j, pi * n + j);
            }
        }
        if pj != k {
            for i in 0..m {
                u.data.swap(i * n + k, i * n + pj);
            }
            col_perm.swap(k, pj);
        }
        let d = u[(k, k)];
        for i in k + 1..m {
            let l = u[(i, k)] / d;
            u[(i, k)] = 0.0;
            for j in k + 1..n {
                let ukj = u[(k, j)];
                u[(i, j)] -= l * ukj;
            }
        }
        rank += 1;
    }
    let mut basis = Vec::with_capacity(n - rank);
    for free in rank..n {
        let mut y = vec![0.0; n];
        y[free] = 1.0;
        for i in (0..rank).rev() {
            let mut acc = -u[(i, free)];
            for j in i + 1..rank {
                acc -= u[(i, j)] * y[j];
            }
            y[i] = acc / u[(i, i)];
        }
        let mut x = vec![0.0; n];
        for (pos, &orig) in col_perm.iter().enumerate() {
            x[orig] = y[pos];
        }
        basis.push(x);
    }
    (rank, basis)
}
