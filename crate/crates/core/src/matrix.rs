//! Dense row-major matrices and per-position channel mixing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::FieldGrid;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Entries drawn from `uniform(-gain/sqrt(cols), gain/sqrt(cols))`.
    pub fn uniform_fan_in<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain / (cols as f64).sqrt();
        let data = (0..rows * cols).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(&a, &b)| a * b).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }
}

/// Applies `weights` to the channel vector at every position, plus an optional
/// per-output bias: `out[o, p] = sum_i W[o, i] x[i, p] + b[o]`.
pub fn channel_matmul<T: Scalar>(field: &FieldGrid<T>, weights: &Matrix<T>, bias: Option<&[T]>) -> FieldGrid<T> {
    let (c_in, h, w) = field.shape();
    assert_eq!(weights.cols, c_in, "weight columns must equal input channels");
    let p = h * w;
    let mut out = vec![T::zero(); weights.rows * p];
    for o in 0..weights.rows {
        let dst = &mut out[o * p..(o + 1) * p];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..c_in {
            let wt = weights.get(o, i);
            if wt == T::zero() {
                continue;
            }
            for (d, &s) in dst.iter_mut().zip(field.channel(i)) {
                *d += wt * s;
            }
        }
    }
    FieldGrid::from_parts(weights.rows, h, w, out)
}
