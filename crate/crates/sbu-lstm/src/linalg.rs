//! Minimal dense linear algebra and elementwise nonlinearities.
//!
//! Row-major `f64` storage with explicit shape fields and no implicit
//! broadcasting; shape mismatches panic with both shapes in the message.
//! All operations are pure.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "Mat::zeros: degenerate shape {rows}x{cols}");
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "Mat::from_rows: no rows");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "Mat::from_rows: ragged row");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rank-1 update `self += a ⊗ b` (used to accumulate weight gradients).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        assert_eq!(
            (self.rows, self.cols),
            (a.len(), b.len()),
            "add_outer: matrix {}x{} vs outer {}x{}",
            self.rows,
            self.cols,
            a.len(),
            b.len()
        );
        for (i, &ai) in a.iter().enumerate() {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (rj, &bj) in row.iter_mut().zip(b) {
                *rj += ai * bj;
            }
        }
    }
}

/// `M · v`.
pub fn matvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    assert_eq!(
        m.cols,
        v.len(),
        "matvec: matrix {}x{} incompatible with vector of length {}",
        m.rows,
        m.cols,
        v.len()
    );
    let mut out = vec![0.0; m.rows];
    for (i, oi) in out.iter_mut().enumerate() {
        let row = &m.data[i * m.cols..(i + 1) * m.cols];
        *oi = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

/// `Mᵀ · v` (backward pass companion of [`matvec`]).
pub fn matvec_t(m: &Mat, v: &[f64]) -> Vec<f64> {
    assert_eq!(
        m.rows,
        v.len(),
        "matvec_t: matrix {}x{} incompatible with vector of length {}",
        m.rows,
        m.cols,
        v.len()
    );
    let mut out = vec![0.0; m.cols];
    for (i, &vi) in v.iter().enumerate() {
        let row = &m.data[i * m.cols..(i + 1) * m.cols];
        for (oj, &rj) in out.iter_mut().zip(row) {
            *oj += vi * rj;
        }
    }
    out
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn tanh_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.tanh()).collect()
}

/// Elementwise product.
pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "hadamard: lengths {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "add: lengths {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn add_assign(a: &mut [f64], b: &[f64]) {
    assert_eq!(a.len(), b.len(), "add_assign: lengths {} vs {}", a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}
