//! Dense row-major matrices and vectors with a pinned accumulation order.
//!
//! The kernels here are deliberately plain: every output element is a dot
//! product accumulated over the inner index in ascending order.  That
//! single rule is a load-bearing contract for the rest of the crate — it
//! is what lets mathematically equivalent code paths (single-sample vs
//! batched forward, a residual layer vs its two-channel rewriting) agree
//! *bitwise*, so equivalence tests can use exact or near-machine-epsilon
//! tolerances instead of loose ones.
//!
//! Row-level parallelism (rayon) is safe under that contract because each
//! output row is still accumulated by one task in the fixed order;
//! results do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this many multiply-adds a kernel stays on the calling thread;
/// splitting tiny products across the pool costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix construction",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Convenience constructor for literals in tests and docs.
    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("matrix construction", "ragged rows", format!("{r} rows")));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.iter().flat_map(|row| row.iter().copied()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    pub fn scale_in_place(&mut self, s: S) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "matrix difference",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (a, b)| acc.max((*a - *b).abs())))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let work = self.rows * self.cols * other.cols;
        let run = |(crow, arow): (&mut [S], &[S])| matmul_row(crow, arow, other);
        if work >= PAR_THRESHOLD {
            out.data
                .par_chunks_mut(other.cols)
                .zip(self.data.par_chunks(self.cols))
                .for_each(run);
        } else {
            out.data
                .chunks_mut(other.cols)
                .zip(self.data.chunks(self.cols))
                .for_each(run);
        }
        Ok(out)
    }

    /// `self · otherᵀ`.  Each output element is a dot product of two
    /// contiguous rows, accumulated left to right.
    pub fn matmul_bt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul (transposed right)",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        let work = self.rows * self.cols * other.rows;
        let run = |(crow, arow): (&mut [S], &[S])| {
            for (c, brow) in crow.iter_mut().zip(other.data.chunks(other.cols)) {
                let mut acc = S::zero();
                for (a, b) in arow.iter().zip(brow) {
                    acc += *a * *b;
                }
                *c = acc;
            }
        };
        if work >= PAR_THRESHOLD {
            out.data
                .par_chunks_mut(other.rows)
                .zip(self.data.par_chunks(self.cols))
                .for_each(run);
        } else {
            out.data
                .chunks_mut(other.rows)
                .zip(self.data.chunks(self.cols))
                .for_each(run);
        }
        Ok(out)
    }

    /// `selfᵀ · other`, with the accumulation running over the shared
    /// (row) index in ascending order.  This is the gradient-side
    /// contraction: both operands are tall batch matrices.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul (transposed left)",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let work = self.rows * self.cols * other.cols;
        let run = |(i, crow): (usize, &mut [S])| {
            // Output row i gathers column i of `self` against every row of
            // `other`: out[i, j] = sum_b self[b, i] * other[b, j].
            for b in 0..self.rows {
                let a_bi = self.data[b * self.cols + i];
                let brow = &other.data[b * other.cols..(b + 1) * other.cols];
                for (c, bv) in crow.iter_mut().zip(brow) {
                    *c += a_bi * *bv;
                }
            }
        };
        if work >= PAR_THRESHOLD {
            out.data
                .par_chunks_mut(other.cols)
                .enumerate()
                .for_each(|(i, crow)| run((i, crow)));
        } else {
            out.data
                .chunks_mut(other.cols)
                .enumerate()
                .for_each(run);
        }
        Ok(out)
    }

    /// Sum over rows, yielding one row (used for bias gradients).
    pub fn column_sums(&self) -> Vector<S> {
        let mut out = vec![S::zero(); self.cols];
        for row in self.data.chunks(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        Vector::from_vec(out)
    }
}

/// One output row of `matmul`: `crow += arow[k] * b_row_k` for ascending k.
#[inline]
fn matmul_row<S: Scalar>(crow: &mut [S], arow: &[S], b: &Matrix<S>) {
    for (k, &a_ik) in arow.iter().enumerate() {
        let brow = &b.data[k * b.cols..(k + 1) * b.cols];
        for (c, &bv) in crow.iter_mut().zip(brow) {
            *c += a_ik * bv;
        }
    }
}

/// `scale * (h · w)` for a batch of row vectors `h`.
///
/// `scale == 0` yields an exact zero matrix; `scale == 1` leaves the
/// product untouched (multiplication by one is exact in IEEE arithmetic).
pub fn batched_affine<S: Scalar>(h: &Matrix<S>, w: &Matrix<S>, scale: S) -> Result<Matrix<S>> {
    let mut out = h.matmul(w)?;
    if scale != S::one() {
        out.scale_in_place(scale);
    }
    Ok(out)
}

/// Dense vector (a row vector wherever it meets a matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct Vector<S> {
    data: Vec<S>,
}

impl<S: Scalar> Vector<S> {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![S::zero(); len],
        }
    }

    pub fn ones(len: usize) -> Self {
        Vector {
            data: vec![S::one(); len],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, i: usize) -> S {
        self.data[i]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, v| acc + *v * *v)
            .sqrt()
    }

    /// `self · m` as a row vector.  Uses the same row kernel as
    /// [`Matrix::matmul`], so a one-row matrix product and a vector
    /// product of the same numbers are bitwise identical.
    pub fn vec_mat(&self, m: &Matrix<S>) -> Result<Vector<S>> {
        if self.len() != m.rows {
            return Err(Error::shape(
                "vector-matrix product",
                format!("len {}", self.len()),
                format!("{}x{}", m.rows, m.cols),
            ));
        }
        let mut out = vec![S::zero(); m.cols];
        matmul_row(&mut out, &self.data, m);
        Ok(Vector { data: out })
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: S, other: &Vector<S>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
    }
}
