use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense `f64` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so guard the degenerate width.
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_acc(self, other, &mut out);
        Ok(out)
    }

    /// `self += other` elementwise; shapes must already agree.
    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a `1 x cols` row to every row in place.
    pub fn add_row_in_place(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        for r in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, b) in r.iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

// Every kernel computes `out[i][j] += a(i,0)*b[0][j] + a(i,1)*b[1][j] + ...`
// adding terms in ascending k order, each with one correctly rounded fused
// multiply-add, so results do not depend on blocking or SIMD width. Terms whose `a` factor is exactly zero
// are skipped; post-ReLU activations often are.

const MR: usize = 4;
const NR: usize = 32;

/// `out += A · b` where `A(i, k) = a[i * rs + k * cs]` is `m × n` and `b` is `n × p`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(m: usize, n: usize, p: usize, a: &[f64], rs: usize, cs: usize, b: &[f64], out: &mut [f64]) {
    if p < 8 {
        for i in 0..m {
            for j in 0..p {
                let mut acc = out[i * p + j];
                for k in 0..n {
                    let aik = a[i * rs + k * cs];
                    if aik != 0.0 {
                        acc = aik.mul_add(b[k * p + j], acc);
                    }
                }
                out[i * p + j] = acc;
            }
        }
        return;
    }
    let mut i0 = 0;
    while i0 < m {
        let rows = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < p {
            let width = NR.min(p - j0);
            if rows == MR && width == NR {
                block_full(n, p, &a[i0 * rs..], rs, cs, &b[j0..], &mut out[i0 * p + j0..]);
            } else {
                block_edge(rows, width, n, p, &a[i0 * rs..], rs, cs, &b[j0..], &mut out[i0 * p + j0..]);
            }
            j0 += width;
        }
        i0 += rows;
    }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn block_full(n: usize, p: usize, a: &[f64], rs: usize, cs: usize, b: &[f64], out: &mut [f64]) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, acc_row) in acc.iter_mut().enumerate() {
        acc_row.copy_from_slice(&out[r * p..r * p + NR]);
    }
    for k in 0..n {
        let av = [a[k * cs], a[rs + k * cs], a[2 * rs + k * cs], a[3 * rs + k * cs]];
        if av == [0.0; MR] {
            continue;
        }
        let brow: &[f64; NR] = b[k * p..k * p + NR].try_into().expect("block width");
        for r in 0..MR {
            for j in 0..NR {
                acc[r][j] = av[r].mul_add(brow[j], acc[r][j]);
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        out[r * p..r * p + NR].copy_from_slice(acc_row);
    }
}

// Same arithmetic as the portable block (one fused multiply-add per term, k
// ascending), written with 512-bit registers because LLVM prefers 256-bit
// vectors on these cores.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[inline(always)]
fn block_full(n: usize, p: usize, a: &[f64], rs: usize, cs: usize, b: &[f64], out: &mut [f64]) {
    use std::arch::x86_64::*;
    assert!(out.len() >= 3 * p + NR && b.len() >= (n - 1) * p + NR || n == 0);
    assert!(n == 0 || a.len() > 3 * rs + (n - 1) * cs);
    // SAFETY: the asserts above bound every load and store below.
    unsafe {
        let o = out.as_mut_ptr();
        let mut acc = [[_mm512_setzero_pd(); 4]; MR];
        for (r, row) in acc.iter_mut().enumerate() {
            for (v, slot) in row.iter_mut().enumerate() {
                *slot = _mm512_loadu_pd(o.add(r * p + 8 * v));
            }
        }
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        for k in 0..n {
            let av = [
                *ap.add(k * cs),
                *ap.add(rs + k * cs),
                *ap.add(2 * rs + k * cs),
                *ap.add(3 * rs + k * cs),
            ];
            if av == [0.0; MR] {
                continue;
            }
            let brow = bp.add(k * p);
            let bv = [
                _mm512_loadu_pd(brow),
                _mm512_loadu_pd(brow.add(8)),
                _mm512_loadu_pd(brow.add(16)),
                _mm512_loadu_pd(brow.add(24)),
            ];
            for (row, &ar) in acc.iter_mut().zip(&av) {
                let s = _mm512_set1_pd(ar);
                for (slot, &bj) in row.iter_mut().zip(&bv) {
                    *slot = _mm512_fmadd_pd(s, bj, *slot);
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            for (v, slot) in row.iter().enumerate() {
                _mm512_storeu_pd(o.add(r * p + 8 * v), *slot);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn block_edge(rows: usize, width: usize, n: usize, p: usize, a: &[f64], rs: usize, cs: usize, b: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let out_row = &mut out[r * p..r * p + width];
        for k in 0..n {
            let ar = a[r * rs + k * cs];
            if ar == 0.0 {
                continue;
            }
            for (o, bv) in out_row.iter_mut().zip(&b[k * p..k * p + width]) {
                *o = ar.mul_add(*bv, *o);
            }
        }
    }
}

/// `out += a · b` for `a: m×n`, `b: n×p`.
pub(crate) fn gemm_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (m, n) = a.shape();
    let p = b.cols;
    debug_assert_eq!(b.rows, n);
    debug_assert_eq!(out.shape(), (m, p));
    gemm_strided(m, n, p, &a.data, n, 1, &b.data, &mut out.data);
}

/// `out += aᵀ · g` for `a: m×n`, `g: m×p`, `out: n×p`.
pub(crate) fn gemm_at_b_acc(a: &Matrix, g: &Matrix, out: &mut Matrix) {
    let (m, n) = a.shape();
    let p = g.cols;
    debug_assert_eq!(g.rows, m);
    debug_assert_eq!(out.shape(), (n, p));
    gemm_strided(n, m, p, &a.data, 1, n, &g.data, &mut out.data);
}

/// `out += g · bᵀ` for `g: m×p`, `b: n×p`, `out: m×n`.
pub(crate) fn gemm_a_bt_acc(g: &Matrix, b: &Matrix, out: &mut Matrix) {
    let bt = b.transpose();
    gemm_acc(g, &bt, out);
}
