//! Embedding matrices and the unit-normalisation shared by both modalities.

use crate::error::{Error, Result};

/// Row-major `rows x dim` matrix of patch or token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                found: values.len(),
            });
        }
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix"));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Sum of the rows selected by a 0/1 mask, accumulated in ascending row
    /// order.
    pub fn masked_sum(&self, mask: &[u8]) -> Result<Vec<f64>> {
        if mask.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: mask.len(),
            });
        }
        let mut acc = vec![0.0; self.dim];
        for (r, _) in mask.iter().enumerate().filter(|(_, &b)| b != 0) {
            for (a, v) in acc.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
        Ok(acc)
    }

    /// Normalised mean of all rows.
    pub fn mean_direction(&self) -> Result<Vec<f64>> {
        self.masked_sum(&vec![1; self.rows]).and_then(|s| l2_normalize(&s))
    }
}

/// Scales `v` to unit Euclidean norm.
///
/// A zero vector has no direction and is rejected instead of producing NaN.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector to normalize"));
    }
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Inner product with a fixed ascending accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}
