//! Small dense row-major matrices.
//!
//! Everything in this crate is low dimensional (states of size ≤ 4, hidden
//! layers of width 64), so a plain `Vec<f64>` backed matrix with naive
//! kernels is both simple and fast enough.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {rows}x{cols} needs {} values", rows * cols);
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn col_vec(values: &[f64]) -> Self {
        Mat { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn scalar(value: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![value] }
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch {:?} x {:?}", self.shape(), rhs.shape());
        let mut out = Mat::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        out
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch {:?} x {:?}", self.shape(), rhs.shape());
        let (k, n, p) = (self.rows, self.cols, rhs.cols);
        let mut out = Mat::zeros(n, p);
        for r in 0..k {
            let a_row = &self.data[r * n..(r + 1) * n];
            let b_row = &rhs.data[r * p..(r + 1) * p];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * p..(i + 1) * p];
                for (oj, &b) in o.iter_mut().zip(b_row) {
                    *oj += a * b;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.cols, "matmul_t shape mismatch {:?} x {:?}", self.shape(), rhs.shape());
        let (n, k, p) = (self.rows, self.cols, rhs.rows);
        let mut out = Mat::zeros(n, p);
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..p {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out.data[i * p + j] = dot(a_row, b_row);
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Mat) -> Mat {
        self.zip_map(rhs, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| f(a)).collect() }
    }

    pub fn zip_map(&self, rhs: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "elementwise shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, rhs: &Mat) {
        assert_eq!(self.shape(), rhs.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, rhs: &Mat) {
        assert_eq!(self.shape(), rhs.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// Same data, new shape (row-major reinterpretation).
    pub fn reshape(&self, rows: usize, cols: usize) -> Mat {
        assert_eq!(rows * cols, self.data.len(), "reshape size mismatch");
        Mat { rows, cols, data: self.data.clone() }
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &Mat) -> Mat {
        assert_eq!(self.cols, below.cols, "vstack column mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&below.data);
        Mat { rows: self.rows + below.rows, cols: self.cols, data }
    }

    /// Rows `start..end`.
    pub fn row_block(&self, start: usize, end: usize) -> Mat {
        Mat { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// LU factorization with partial pivoting.
    pub fn lu(&self) -> Result<Lu> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!("LU of non-square {:?}", self.shape())));
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, a[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax <= scale * 1e-14 {
                return Err(Error::Singular(format!("pivot {pmax:e} in column {k}")));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / pivot;
                a[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, a, perm })
    }

    pub fn solve(&self, rhs: &Mat) -> Result<Mat> {
        self.lu().map(|lu| lu.solve(rhs))
    }

    pub fn inverse(&self) -> Result<Mat> {
        self.solve(&Mat::identity(self.rows))
    }
}

pub struct Lu {
    n: usize,
    a: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn solve(&self, rhs: &Mat) -> Mat {
        let n = self.n;
        assert_eq!(rhs.rows, n);
        let mut out = Mat::zeros(n, rhs.cols);
        for c in 0..rhs.cols {
            let mut y: Vec<f64> = self.perm.iter().map(|&p| rhs[(p, c)]).collect();
            for i in 0..n {
                for k in 0..i {
                    y[i] -= self.a[i * n + k] * y[k];
                }
            }
            for i in (0..n).rev() {
                for k in i + 1..n {
                    y[i] -= self.a[i * n + k] * y[k];
                }
                y[i] /= self.a[i * n + i];
            }
            for i in 0..n {
                out[(i, c)] = y[i];
            }
        }
        out
    }
}

/// `out += a · b` (ikj loop order).
pub fn matmul_into(a: &Mat, b: &Mat, out: &mut Mat) {
    let (n, k, p) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(out.shape(), (n, p));
    for i in 0..n {
        let o = &mut out.data[i * p..(i + 1) * p];
        for r in 0..k {
            let av = a.data[i * k + r];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[r * p..(r + 1) * p];
            for (oj, &bv) in o.iter_mut().zip(b_row) {
                *oj += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // Four independent accumulators break the add dependency chain.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}
