//! Dense complex linear algebra for small operators.
//!
//! Everything here is sized for dimensions up to a few hundred. Eigenproblems use
//! cyclic Jacobi rotations, which are slow asymptotically but accurate to machine
//! precision on Hermitian input and trivially deterministic.

use crate::error::{Error, Result};
use num_complex::Complex64;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Eigenvalues in (-PSD_CLIP, 0) are treated as numerical zeros.
pub const PSD_CLIP: f64 = 1e-10;
/// Eigenvalues at or below this are outside the support.
pub const SUPPORT_TOL: f64 = 1e-12;

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

/// Ascending eigenvalues with eigenvectors stored as matching columns.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: ComplexMatrix,
}

/// Thin SVD: `m = u * diag(s) * v†` with `s` descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: ComplexMatrix,
    pub s: Vec<f64>,
    pub v: ComplexMatrix,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_real(rows: usize, cols: usize, vals: &[f64]) -> Self {
        assert_eq!(vals.len(), rows * cols);
        Self { rows, cols, data: vals.iter().map(|&x| C64::new(x, 0.0)).collect() }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = C64::new(x, 0.0);
        }
        m
    }

    /// Column vector.
    pub fn column(v: &[C64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// `|v><v|`.
    pub fn outer(v: &[C64]) -> Self {
        Self::outer2(v, v)
    }

    /// `|u><v|`.
    pub fn outer2(u: &[C64], v: &[C64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for i in 0..u.len() {
            for j in 0..v.len() {
                m.data[i * v.len() + j] = u[i] * v[j].conj();
            }
        }
        m
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn col(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[C64]) {
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == ZERO {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn scale_c(&self, s: C64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn trace_re(&self) -> f64 {
        self.trace().re
    }

    /// `Tr[self * other]` without forming the product.
    pub fn trace_product(&self, other: &Self) -> C64 {
        assert_eq!(self.cols, other.rows);
        assert_eq!(self.rows, other.cols);
        let mut s = ZERO;
        for i in 0..self.rows {
            for k in 0..self.cols {
                s += self.data[i * self.cols + k] * other.data[k * other.cols + i];
            }
        }
        s
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn hermiticity_error(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut e: f64 = 0.0;
        for i in 0..self.rows {
            for j in i..self.cols {
                e = e.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        e
    }

    /// `(m + m†)/2`.
    pub fn hermitize(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in i..self.cols {
                let z = (self[(i, j)] + self[(j, i)].conj()) * 0.5;
                out[(i, j)] = z;
                out[(j, i)] = z.conj();
            }
        }
        out
    }

    pub fn kron(&self, other: &Self) -> Self {
        let (r, c) = (self.rows * other.rows, self.cols * other.cols);
        let mut out = Self::zeros(r, c);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self[(i, j)];
                if a == ZERO {
                    continue;
                }
                for k in 0..other.rows {
                    for l in 0..other.cols {
                        out.data[(i * other.rows + k) * c + j * other.cols + l] = a * other[(k, l)];
                    }
                }
            }
        }
        out
    }

    /// Conjugation `self * m * self†`.
    pub fn conjugate(&self, m: &Self) -> Self {
        self.matmul(m).matmul(&self.adjoint())
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.data.iter().zip(&other.data).all(|(a, b)| (a - b).norm() <= tol)
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, o: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, o: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, o: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(o)
    }
}

/// Unitary 2x2 rotation that zeroes the (p,q) entry of the Hermitian block
/// `[[app, apq], [conj(apq), aqq]]`. Returns `(upp, upq, uqp, uqq)`.
fn jacobi_rotation(app: f64, aqq: f64, apq: C64) -> (C64, C64, C64, C64) {
    let r = apq.norm();
    let phase = if r > 0.0 { apq / r } else { ONE };
    let theta = (aqq - app) / (2.0 * r);
    let t = if theta.is_finite() {
        let sg = if theta >= 0.0 { 1.0 } else { -1.0 };
        sg / (theta.abs() + (theta * theta + 1.0).sqrt())
    } else {
        0.0
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let ph = phase.conj();
    (C64::new(c, 0.0), C64::new(s, 0.0), -ph * s, ph * c)
}

fn off_diagonal_mass(a: &ComplexMatrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows {
        for j in 0..a.cols {
            if i != j {
                s += a[(i, j)].norm_sqr();
            }
        }
    }
    s.sqrt()
}

/// Hermitian eigendecomposition with ascending eigenvalues.
pub fn eig_hermitian(m: &ComplexMatrix) -> Result<Spectrum> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("eig of {}x{} matrix", m.rows, m.cols)));
    }
    if m.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite);
    }
    let herr = m.hermiticity_error();
    if herr > 1e-9 * m.max_abs().max(1.0) {
        return Err(Error::NotHermitian(herr));
    }
    let n = m.rows;
    let mut a = m.hermitize();
    let mut v = ComplexMatrix::identity(n);
    let scale = a.frobenius().max(1.0);
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_mass(&a) <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.norm() < 1e-300 {
                    continue;
                }
                let (upp, upq, uqp, uqq) = jacobi_rotation(a[(p, p)].re, a[(q, q)].re, apq);
                for i in 0..n {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    a[(i, p)] = x * upp + y * uqp;
                    a[(i, q)] = x * upq + y * uqq;
                }
                for j in 0..n {
                    let (x, y) = (a[(p, j)], a[(q, j)]);
                    a[(p, j)] = upp.conj() * x + uqp.conj() * y;
                    a[(q, j)] = upq.conj() * x + uqq.conj() * y;
                }
                a[(p, q)] = ZERO;
                a[(q, p)] = ZERO;
                a[(p, p)] = C64::new(a[(p, p)].re, 0.0);
                a[(q, q)] = C64::new(a[(q, q)].re, 0.0);
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = x * upp + y * uqp;
                    v[(i, q)] = x * upq + y * uqq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let mut vectors = ComplexMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.col(src);
        fix_phase(&mut col);
        vectors.set_col(dst, &col);
    }
    Ok(Spectrum { values, vectors })
}

/// Rotate so the largest-magnitude component is real and positive.
fn fix_phase(v: &mut [C64]) {
    let mut best = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm() > v[best].norm() + 1e-12 {
            best = i;
        }
    }
    let r = v[best].norm();
    if r > 0.0 {
        let ph = v[best].conj() / r;
        for z in v.iter_mut() {
            *z *= ph;
        }
    }
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V f(Λ) V†`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> ComplexMatrix {
        let n = self.dim();
        let mut out = ComplexMatrix::zeros(n, n);
        for k in 0..n {
            let w = f(self.values[k]);
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                let vi = self.vectors[(i, k)] * w;
                for j in 0..n {
                    out[(i, j)] += vi * self.vectors[(j, k)].conj();
                }
            }
        }
        out
    }

    /// Projector onto eigenvectors whose eigenvalue satisfies `pred`.
    pub fn projector(&self, pred: impl Fn(f64) -> bool) -> ComplexMatrix {
        self.apply(|x| if pred(x) { 1.0 } else { 0.0 })
    }

    pub fn support_projector(&self) -> ComplexMatrix {
        self.projector(|x| x > SUPPORT_TOL)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

/// Thin singular value decomposition by one-sided Jacobi rotations.
pub fn svd(m: &ComplexMatrix) -> Result<Svd> {
    if m.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite);
    }
    if m.rows < m.cols {
        let t = svd(&m.adjoint())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let (r, c) = (m.rows, m.cols);
    let mut a = m.clone();
    let mut v = ComplexMatrix::identity(c);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in (p + 1)..c {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, ZERO);
                for i in 0..r {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    alpha += x.norm_sqr();
                    beta += y.norm_sqr();
                    gamma += x.conj() * y;
                }
                if gamma.norm() <= JACOBI_TOL * (alpha * beta).sqrt() || gamma.norm() < 1e-300 {
                    continue;
                }
                rotated = true;
                let (upp, upq, uqp, uqq) = jacobi_rotation(alpha, beta, gamma);
                for i in 0..r {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    a[(i, p)] = x * upp + y * uqp;
                    a[(i, q)] = x * upq + y * uqq;
                }
                for i in 0..c {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = x * upp + y * uqp;
                    v[(i, q)] = x * upq + y * uqq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..c).map(|j| a.col(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let top = norms.iter().cloned().fold(0.0, f64::max);
    let mut u = ComplexMatrix::zeros(r, c);
    let mut vs = ComplexMatrix::zeros(c, c);
    let mut s = Vec::with_capacity(c);
    let mut filled = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let sv = norms[src];
        vs.set_col(dst, &v.col(src));
        if sv > 1e-14 * top.max(1e-300) && sv > 0.0 {
            let col: Vec<C64> = a.col(src).iter().map(|z| z / sv).collect();
            u.set_col(dst, &col);
            filled.push(dst);
            s.push(sv);
        } else {
            s.push(0.0);
        }
    }
    complete_orthonormal(&mut u, &filled);
    Ok(Svd { u, s, v: vs })
}

/// Fill the columns of `u` not listed in `filled` with orthonormal vectors
/// orthogonal to the filled ones (Gram-Schmidt over the standard basis).
pub fn complete_orthonormal(u: &mut ComplexMatrix, filled: &[usize]) {
    let r = u.rows;
    let mut basis: Vec<Vec<C64>> = filled.iter().map(|&j| u.col(j)).collect();
    let mut cand = 0;
    for j in 0..u.cols {
        if filled.contains(&j) {
            continue;
        }
        while cand < r {
            let mut e = vec![ZERO; r];
            e[cand] = ONE;
            cand += 1;
            for _ in 0..2 {
                for b in &basis {
                    let ov: C64 = b.iter().zip(&e).map(|(x, y)| x.conj() * y).sum();
                    for (ei, bi) in e.iter_mut().zip(b) {
                        *ei -= ov * bi;
                    }
                }
            }
            let nrm = e.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if nrm > 1e-6 {
                let e: Vec<C64> = e.iter().map(|z| z / nrm).collect();
                u.set_col(j, &e);
                basis.push(e);
                break;
            }
        }
    }
}

/// Apply `f` to the spectrum of a PSD matrix, clipping numerical negatives.
pub fn psd_func(m: &ComplexMatrix, f: impl Fn(f64) -> f64) -> Result<ComplexMatrix> {
    let sp = eig_hermitian(m)?;
    if sp.min() < -PSD_CLIP * m.max_abs().max(1.0) {
        return Err(Error::NotPsd(sp.min()));
    }
    Ok(sp.apply(|x| f(x.max(0.0))))
}

pub fn sqrt_psd(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    psd_func(m, f64::sqrt)
}

/// Moore-Penrose inverse square root on the support.
pub fn inv_sqrt_psd(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    psd_func(m, |x| if x > SUPPORT_TOL { 1.0 / x.sqrt() } else { 0.0 })
}

/// Positive part of a Hermitian matrix.
pub fn positive_part(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    Ok(eig_hermitian(m)?.apply(|x| x.max(0.0)))
}

/// Schatten 1-norm.
pub fn trace_norm(m: &ComplexMatrix) -> Result<f64> {
    if m.is_square() && m.hermiticity_error() <= 1e-9 * m.max_abs().max(1.0) {
        Ok(eig_hermitian(m)?.values.iter().map(|x| x.abs()).sum())
    } else {
        Ok(svd(m)?.s.iter().sum())
    }
}

/// Unnormalized trace distance `‖a − b‖₁`.
pub fn trace_distance(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    trace_norm(&(a - b))
}

/// `F(a, b) = ‖√a √b‖₁` for PSD inputs of trace at most one.
pub fn fidelity(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::Dimension("fidelity operands differ in shape".into()));
    }
    let sa = sqrt_psd(a)?;
    let sb = sqrt_psd(b)?;
    Ok(svd(&sa.matmul(&sb))?.s.iter().sum())
}

/// Fidelity for sub-normalized states.
pub fn generalized_fidelity(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<f64> {
    let f = fidelity(a, b)?;
    let ta = (1.0 - a.trace_re()).max(0.0);
    let tb = (1.0 - b.trace_re()).max(0.0);
    Ok(f + (ta * tb).sqrt())
}

/// Reorder tensor factors: output factor `i` is input factor `perm[i]`.
pub fn permute_subsystems(m: &ComplexMatrix, dims: &[usize], perm: &[usize]) -> ComplexMatrix {
    let n: usize = dims.iter().product();
    assert_eq!(m.rows, n);
    assert_eq!(m.cols, n);
    let map = permutation_map(dims, perm);
    let mut out = ComplexMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = m[(map[i], map[j])];
        }
    }
    out
}

/// Same reordering for a state vector.
pub fn permute_vector(v: &[C64], dims: &[usize], perm: &[usize]) -> Vec<C64> {
    permutation_map(dims, perm).into_iter().map(|k| v[k]).collect()
}

/// `map[new_index] = old_index`.
fn permutation_map(dims: &[usize], perm: &[usize]) -> Vec<usize> {
    let n: usize = dims.iter().product();
    let new_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let mut old_strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        old_strides[i] = old_strides[i + 1] * dims[i + 1];
    }
    let mut map = Vec::with_capacity(n);
    let mut digits = vec![0usize; dims.len()];
    for _ in 0..n {
        let old: usize = digits.iter().enumerate().map(|(i, &d)| d * old_strides[perm[i]]).sum();
        map.push(old);
        for i in (0..digits.len()).rev() {
            digits[i] += 1;
            if digits[i] < new_dims[i] {
                break;
            }
            digits[i] = 0;
        }
    }
    map
}

/// Trace out every factor not listed in `keep` (kept factors stay in their
/// original relative order).
pub fn partial_trace_dims(m: &ComplexMatrix, dims: &[usize], keep: &[usize]) -> ComplexMatrix {
    let mut keep: Vec<usize> = keep.to_vec();
    keep.sort_unstable();
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep.contains(i)).collect();
    let perm: Vec<usize> = keep.iter().chain(&traced).copied().collect();
    let p = permute_subsystems(m, dims, &perm);
    let dk: usize = keep.iter().map(|&i| dims[i]).product();
    let dt: usize = traced.iter().map(|&i| dims[i]).product();
    let mut out = ComplexMatrix::zeros(dk, dk);
    for i in 0..dk {
        for j in 0..dk {
            let mut s = ZERO;
            for t in 0..dt {
                s += p[(i * dt + t, j * dt + t)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Reduced operator of a pure state `psi` on `dims`, keeping `keep`.
pub fn reduced_from_vector(psi: &[C64], dims: &[usize], keep: &[usize]) -> ComplexMatrix {
    let mut keep: Vec<usize> = keep.to_vec();
    keep.sort_unstable();
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep.contains(i)).collect();
    let perm: Vec<usize> = keep.iter().chain(&traced).copied().collect();
    let v = permute_vector(psi, dims, &perm);
    let dk: usize = keep.iter().map(|&i| dims[i]).product();
    let dt: usize = traced.iter().map(|&i| dims[i]).product();
    let mut out = ComplexMatrix::zeros(dk, dk);
    for i in 0..dk {
        for j in i..dk {
            let mut s = ZERO;
            for t in 0..dt {
                s += v[i * dt + t] * v[j * dt + t].conj();
            }
            out[(i, j)] = s;
            out[(j, i)] = s.conj();
        }
    }
    out
}

/// Apply `op` (shape `out × dims[pos]`) to tensor factor `pos` of the vector `v`.
/// The factor's dimension becomes `op.rows`.
pub fn apply_factor(v: &[C64], dims: &[usize], pos: usize, op: &ComplexMatrix) -> Vec<C64> {
    assert_eq!(op.cols, dims[pos]);
    let before: usize = dims[..pos].iter().product();
    let after: usize = dims[pos + 1..].iter().product();
    let (din, dout) = (dims[pos], op.rows);
    let mut out = vec![ZERO; before * dout * after];
    for b in 0..before {
        for i in 0..dout {
            for j in 0..din {
                let w = op[(i, j)];
                if w == ZERO {
                    continue;
                }
                let src = &v[(b * din + j) * after..(b * din + j + 1) * after];
                let dst = &mut out[(b * dout + i) * after..(b * dout + i + 1) * after];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    out
}

pub fn inner(u: &[C64], v: &[C64]) -> C64 {
    u.iter().zip(v).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn kron_vec(u: &[C64], v: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for a in u {
        for b in v {
            out.push(a * b);
        }
    }
    out
}

pub fn log2(x: f64) -> f64 {
    x.log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn reconstruct(sp: &Spectrum) -> ComplexMatrix {
        sp.apply(|x| x)
    }

    #[test]
    fn identity_eigenvalues() {
        let sp = eig_hermitian(&ComplexMatrix::identity(4)).unwrap();
        assert_eq!(sp.values, vec![1.0; 4]);
    }

    #[test]
    fn diagonal_sorted() {
        let sp = eig_hermitian(&ComplexMatrix::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(sp.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_by_two_matches_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let h = random::hermitian(&mut rng, 2);
            let (a, d, b) = (h[(0, 0)].re, h[(1, 1)].re, h[(0, 1)]);
            let mid = (a + d) / 2.0;
            let rad = (((a - d) / 2.0).powi(2) + b.norm_sqr()).sqrt();
            let sp = eig_hermitian(&h).unwrap();
            assert!((sp.values[0] - (mid - rad)).abs() < 1e-12);
            assert!((sp.values[1] - (mid + rad)).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_random_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=16 {
            let h = random::hermitian(&mut rng, n);
            let sp = eig_hermitian(&h).unwrap();
            assert!(reconstruct(&sp).approx_eq(&h, 1e-8), "n = {n}");
            let vtv = sp.vectors.adjoint().matmul(&sp.vectors);
            assert!(vtv.approx_eq(&ComplexMatrix::identity(n), 1e-9));
            assert!(sp.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn rejects_non_hermitian() {
        let mut m = ComplexMatrix::identity(2);
        m[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(eig_hermitian(&m), Err(Error::NotHermitian(_))));
        assert!(eig_hermitian(&ComplexMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn degenerate_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random::unitary(&mut rng, 4);
        let m = u.conjugate(&ComplexMatrix::from_diag(&[0.5, 0.5, 0.0, 0.0]));
        let a = eig_hermitian(&m).unwrap();
        let b = eig_hermitian(&m).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn svd_identity_and_rank_one() {
        let s = svd(&ComplexMatrix::identity(3)).unwrap();
        assert!(s.s.iter().all(|&x| (x - 1.0).abs() < 1e-14));
        let u = [c(1.0, 1.0), c(0.0, 2.0), c(-1.0, 0.0)];
        let v = [c(0.5, 0.0), c(0.0, -1.0)];
        let s = svd(&ComplexMatrix::outer2(&u, &v)).unwrap();
        assert!((s.s[0] - norm(&u) * norm(&v)).abs() < 1e-12);
        assert!(s.s[1].abs() < 1e-12);
    }

    #[test]
    fn svd_random_against_eig() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (r, cc) in [(3, 2), (2, 3), (5, 5), (4, 1), (6, 3)] {
            let m = random::ginibre(&mut rng, r, cc);
            let s = svd(&m).unwrap();
            let mut rebuilt = ComplexMatrix::zeros(r, cc);
            for k in 0..s.s.len() {
                for i in 0..r {
                    for j in 0..cc {
                        rebuilt[(i, j)] += s.u[(i, k)] * s.s[k] * s.v[(j, k)].conj();
                    }
                }
            }
            assert!(rebuilt.approx_eq(&m, 1e-8));
            let ev = eig_hermitian(&m.adjoint().matmul(&m)).unwrap();
            let mut want: Vec<f64> = ev.values.iter().map(|x| x.max(0.0).sqrt()).collect();
            want.sort_by(|a, b| b.total_cmp(a));
            for k in 0..s.s.len() {
                assert!((s.s[k] - want[k]).abs() < 1e-8);
            }
            let utu = s.u.adjoint().matmul(&s.u);
            assert!(utu.approx_eq(&ComplexMatrix::identity(s.s.len()), 1e-9));
        }
    }

    #[test]
    fn svd_completes_left_vectors_when_rank_deficient() {
        let m = ComplexMatrix::from_diag(&[2.0, 0.0, 0.0]);
        let s = svd(&m).unwrap();
        assert!(s.u.adjoint().matmul(&s.u).approx_eq(&ComplexMatrix::identity(3), 1e-12));
    }

    #[test]
    fn partial_trace_product_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random::density(&mut rng, 2, 2);
        let b = random::density(&mut rng, 3, 3);
        let ab = a.kron(&b);
        assert!(partial_trace_dims(&ab, &[2, 3], &[0]).approx_eq(&a, 1e-12));
        assert!(partial_trace_dims(&ab, &[2, 3], &[1]).approx_eq(&b, 1e-12));

        let rho = random::density(&mut rng, 4, 4);
        let mut want = ComplexMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    want[(i, j)] += rho[(i * 2 + k, j * 2 + k)];
                }
            }
        }
        assert!(partial_trace_dims(&rho, &[2, 2], &[0]).approx_eq(&want, 1e-14));
    }

    #[test]
    fn reduced_from_vector_matches_density_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = random::pure(&mut rng, 24);
        let full = ComplexMatrix::outer(&psi);
        let dims = [2, 3, 4];
        for keep in [vec![0], vec![1], vec![2], vec![0, 2], vec![1, 2]] {
            let a = partial_trace_dims(&full, &dims, &keep);
            let b = reduced_from_vector(&psi, &dims, &keep);
            assert!(a.approx_eq(&b, 1e-13));
        }
    }

    #[test]
    fn apply_factor_matches_kron() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = random::pure(&mut rng, 12);
        let op = random::ginibre(&mut rng, 5, 3);
        let full = ComplexMatrix::identity(2).kron(&op).kron(&ComplexMatrix::identity(2));
        let want = full.matvec(&v);
        let got = apply_factor(&v, &[2, 3, 2], 1, &op);
        assert!(want.iter().zip(&got).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn permutation_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random::density(&mut rng, 2, 2);
        let b = random::density(&mut rng, 3, 3);
        let swapped = permute_subsystems(&a.kron(&b), &[2, 3], &[1, 0]);
        assert!(swapped.approx_eq(&b.kron(&a), 1e-14));
    }

    #[test]
    fn trace_distance_examples() {
        let a = ComplexMatrix::from_diag(&[0.6, 0.4]);
        let b = ComplexMatrix::from_diag(&[0.5, 0.5]);
        assert!((trace_distance(&a, &b).unwrap() - 0.2).abs() < 1e-14);
        let z = ComplexMatrix::from_diag(&[1.0, 0.0]);
        let o = ComplexMatrix::from_diag(&[0.0, 1.0]);
        assert!((trace_distance(&z, &o).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(trace_distance(&a, &a).unwrap(), 0.0);
        assert!(trace_distance(&a, &ComplexMatrix::identity(3)).is_err());
    }

    #[test]
    fn fidelity_examples() {
        let a = ComplexMatrix::from_diag(&[0.5, 0.5]);
        let b = ComplexMatrix::from_diag(&[0.9, 0.1]);
        let want = 0.45f64.sqrt() + 0.05f64.sqrt();
        assert!((fidelity(&a, &b).unwrap() - want).abs() < 1e-12);
        let z = ComplexMatrix::from_diag(&[1.0, 0.0]);
        let o = ComplexMatrix::from_diag(&[0.0, 1.0]);
        assert!(fidelity(&z, &o).unwrap().abs() < 1e-12);
        assert!(generalized_fidelity(&z, &o).unwrap().abs() < 1e-12);
        assert!((fidelity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let half = ComplexMatrix::from_diag(&[0.5, 0.0]);
        assert!((generalized_fidelity(&half, &half).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuchs_van_de_graaf_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [2, 3, 4] {
            for _ in 0..30 {
                let a = random::density(&mut rng, n, n);
                let b = random::density(&mut rng, n, 1 + n / 2);
                let f = fidelity(&a, &b).unwrap();
                let t = trace_distance(&a, &b).unwrap();
                assert!(2.0 * (1.0 - f) <= t + 1e-8);
                assert!(t <= 2.0 * (1.0 - f * f).max(0.0).sqrt() + 1e-8);
                assert!((f - fidelity(&b, &a).unwrap()).abs() < 1e-9);
            }
        }
    }
}
