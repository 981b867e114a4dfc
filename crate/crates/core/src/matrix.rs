//! Dense row-major matrices and the kernels the training loop runs hot.
//!
//! The multiply kernels keep a fixed accumulation order (outer product over
//! the shared dimension), so results are bitwise reproducible while the inner
//! loops stay auto-vectorizable.

use crate::Scalar;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    /// Wrap an existing row-major buffer. Panics if the length disagrees.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
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
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn map<F: Fn(S) -> S>(&self, f: F) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy the given rows into a new matrix, in the order given.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix<S> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    pub fn max_abs_diff(&self, other: &Matrix<S>) -> S {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }
}

impl<S: std::fmt::Debug> std::fmt::Debug for Matrix<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.data[r * self.cols..(r + 1) * self.cols])?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

/// Fused multiply-add where the target has the instruction, plain otherwise.
/// Results are reproducible for a given build either way.
#[inline(always)]
fn fma<S: Scalar>(a: S, b: S, c: S) -> S {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// `out = a · b`.
pub fn matmul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_acc(&mut out, a, b);
    out
}

/// `acc += a · b`. Four rows of `b` are folded per pass so the inner loop has
/// instruction-level parallelism even when `b` is narrow; the accumulation
/// order is fixed by the code, not the vector width. Narrow outputs take a
/// separate path that keeps the output row in stack accumulators.
pub fn matmul_acc<S: Scalar>(acc: &mut Matrix<S>, a: &Matrix<S>, b: &Matrix<S>) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    assert_eq!((acc.rows, acc.cols), (a.rows, b.cols), "matmul output shape");
    let m = b.cols;
    let kdim = a.cols;
    if m <= NARROW_M && kdim >= 16 {
        return matmul_acc_narrow(acc, a, b);
    }
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = &mut acc.data[i * m..(i + 1) * m];
        let mut k = 0;
        while k + 4 <= kdim {
            let (a0, a1, a2, a3) = (arow[k], arow[k + 1], arow[k + 2], arow[k + 3]);
            let b0 = &b.data[k * m..(k + 1) * m];
            let b1 = &b.data[(k + 1) * m..(k + 2) * m];
            let b2 = &b.data[(k + 2) * m..(k + 3) * m];
            let b3 = &b.data[(k + 3) * m..(k + 4) * m];
            for j in 0..m {
                let t01 = fma(a1, b1[j], a0 * b0[j]);
                let t23 = fma(a3, b3[j], a2 * b2[j]);
                crow[j] = crow[j] + t01 + t23;
            }
            k += 4;
        }
        while k < kdim {
            let aik = arow[k];
            let brow = &b.data[k * m..(k + 1) * m];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = fma(aik, bv, *c);
            }
            k += 1;
        }
    }
}

const NARROW_M: usize = 16;

/// Narrow-output inner kernel: the whole output row lives in two independent
/// stack accumulators while eight `b` rows are folded per pass, which keeps
/// the dependency chains short when `m` is a handful of columns.
fn matmul_acc_narrow<S: Scalar>(acc: &mut Matrix<S>, a: &Matrix<S>, b: &Matrix<S>) {
    let m = b.cols;
    let kdim = a.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let mut acc0 = [S::zero(); NARROW_M];
        let mut acc1 = [S::zero(); NARROW_M];
        let mut k = 0;
        while k + 8 <= kdim {
            let b0 = &b.data[k * m..(k + 1) * m];
            let b1 = &b.data[(k + 1) * m..(k + 2) * m];
            let b2 = &b.data[(k + 2) * m..(k + 3) * m];
            let b3 = &b.data[(k + 3) * m..(k + 4) * m];
            let b4 = &b.data[(k + 4) * m..(k + 5) * m];
            let b5 = &b.data[(k + 5) * m..(k + 6) * m];
            let b6 = &b.data[(k + 6) * m..(k + 7) * m];
            let b7 = &b.data[(k + 7) * m..(k + 8) * m];
            let (a0, a1, a2, a3) = (arow[k], arow[k + 1], arow[k + 2], arow[k + 3]);
            let (a4, a5, a6, a7) = (arow[k + 4], arow[k + 5], arow[k + 6], arow[k + 7]);
            for j in 0..m {
                let t01 = fma(a1, b1[j], a0 * b0[j]);
                let t23 = fma(a3, b3[j], a2 * b2[j]);
                acc0[j] = acc0[j] + t01 + t23;
                let t45 = fma(a5, b5[j], a4 * b4[j]);
                let t67 = fma(a7, b7[j], a6 * b6[j]);
                acc1[j] = acc1[j] + t45 + t67;
            }
            k += 8;
        }
        while k < kdim {
            let aik = arow[k];
            let brow = &b.data[k * m..(k + 1) * m];
            for (l, &bv) in acc0[..m].iter_mut().zip(brow) {
                *l = fma(aik, bv, *l);
            }
            k += 1;
        }
        let crow = &mut acc.data[i * m..(i + 1) * m];
        for j in 0..m {
            crow[j] = crow[j] + (acc0[j] + acc1[j]);
        }
    }
}

/// `acc += aᵀ · b` without materializing the transpose; streams rows of both,
/// folding four at a time like [`matmul_acc`].
pub fn matmul_tn_acc<S: Scalar>(acc: &mut Matrix<S>, a: &Matrix<S>, b: &Matrix<S>) {
    assert_eq!(a.rows, b.rows, "matmul_tn shared dimension");
    assert_eq!((acc.rows, acc.cols), (a.cols, b.cols), "matmul_tn output shape");
    let m = b.cols;
    let kdim = a.cols;
    let n = a.rows;
    let mut r = 0;
    while r + 4 <= n {
        let (ar0, ar1, ar2, ar3) = (a.row(r), a.row(r + 1), a.row(r + 2), a.row(r + 3));
        let b0 = &b.data[r * m..(r + 1) * m];
        let b1 = &b.data[(r + 1) * m..(r + 2) * m];
        let b2 = &b.data[(r + 2) * m..(r + 3) * m];
        let b3 = &b.data[(r + 3) * m..(r + 4) * m];
        for k in 0..kdim {
            let (a0, a1, a2, a3) = (ar0[k], ar1[k], ar2[k], ar3[k]);
            let crow = &mut acc.data[k * m..(k + 1) * m];
            for j in 0..m {
                let t01 = fma(a1, b1[j], a0 * b0[j]);
                let t23 = fma(a3, b3[j], a2 * b2[j]);
                crow[j] = crow[j] + t01 + t23;
            }
        }
        r += 4;
    }
    while r < n {
        let arow = a.row(r);
        let brow = &b.data[r * m..(r + 1) * m];
        for (k, &av) in arow.iter().enumerate() {
            let crow = &mut acc.data[k * m..(k + 1) * m];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = fma(av, bv, *c);
            }
        }
        r += 1;
    }
}

/// `acc += a · bᵀ`; `b` is transposed internally once.
pub fn matmul_nt_acc<S: Scalar>(acc: &mut Matrix<S>, a: &Matrix<S>, b: &Matrix<S>) {
    assert_eq!(a.cols, b.cols, "matmul_nt shared dimension");
    let bt = b.transpose();
    matmul_acc(acc, a, &bt);
}
