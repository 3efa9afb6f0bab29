//! Triplet margin loss, symmetric CLIP loss, and the combined objective.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embed::{dot, l2_normalize};
use crate::error::{Error, Result};
use crate::similarity::MiniBatch;
use crate::special::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Triplet margin.
    pub gamma: f64,
    /// Weight of the triplet term.
    pub lambda: f64,
    pub clip_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            lambda: 0.2,
            clip_temperature: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("gamma and lambda must be non-negative".into()));
        }
        if !(self.clip_temperature > 0.0) {
            return Err(Error::Config("clip temperature must be positive".into()));
        }
        Ok(())
    }
}

fn square_size(x: &ArrayView2<'_, f64>) -> Result<usize> {
    let (rows, cols) = x.dim();
    if rows != cols {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: cols,
        });
    }
    if rows < 2 {
        return Err(Error::BatchTooSmall(rows));
    }
    Ok(rows)
}

/// Hardest off-diagonal column of row `i`; ties go to the lowest index.
fn hardest_negative(x: &ArrayView2<'_, f64>, i: usize) -> usize {
    (0..x.ncols())
        .filter(|&j| j != i)
        .fold(None, |best: Option<usize>, j| match best {
            Some(b) if x[[i, b]] >= x[[i, j]] => Some(b),
            _ => Some(j),
        })
        .expect("at least two columns")
}

/// Row-wise triplet loss
/// `(1/C) sum_i max(max_{j != i} X[i, j] - X[i, i] + gamma, 0)`.
pub fn phi_gamma(x: &ArrayView2<'_, f64>, gamma: f64) -> Result<f64> {
    let c = square_size(x)?;
    let total: f64 = (0..c)
        .map(|i| {
            let j = hardest_negative(x, i);
            (x[[i, j]] - x[[i, i]] + gamma).max(0.0)
        })
        .sum();
    Ok(total / c as f64)
}

/// Subgradient of [`phi_gamma`]; inactive hinges contribute nothing.
pub fn phi_gamma_grad(x: &ArrayView2<'_, f64>, gamma: f64) -> Result<Array2<f64>> {
    let c = square_size(x)?;
    let mut g = Array2::zeros((c, c));
    for i in 0..c {
        let j = hardest_negative(x, i);
        if x[[i, j]] - x[[i, i]] + gamma > 0.0 {
            g[[i, j]] += 1.0 / c as f64;
            g[[i, i]] -= 1.0 / c as f64;
        }
    }
    Ok(g)
}

/// `Phi(Q) + Phi(Q^T)`.
pub fn triplet_loss(q_bar: &ArrayView2<'_, f64>, gamma: f64) -> Result<f64> {
    Ok(phi_gamma(q_bar, gamma)? + phi_gamma(&q_bar.t(), gamma)?)
}

pub fn triplet_loss_grad(q_bar: &ArrayView2<'_, f64>, gamma: f64) -> Result<Array2<f64>> {
    let rows = phi_gamma_grad(q_bar, gamma)?;
    let cols = phi_gamma_grad(&q_bar.t(), gamma)?;
    Ok(rows + cols.t())
}

/// Symmetric InfoNCE over cosine similarities scaled by `1 / temperature`,
/// averaged over the image-to-text and text-to-image directions.
pub fn clip_loss(image_globals: &[Vec<f64>], text_globals: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let c = image_globals.len();
    if c < 2 {
        return Err(Error::BatchTooSmall(c));
    }
    if text_globals.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            found: text_globals.len(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("clip temperature must be positive".into()));
    }
    let img = image_globals.iter().map(|v| l2_normalize(v)).collect::<Result<Vec<_>>>()?;
    let txt = text_globals.iter().map(|v| l2_normalize(v)).collect::<Result<Vec<_>>>()?;
    let logits = Array2::from_shape_fn((c, c), |(i, j)| dot(&img[i], &txt[j]) / temperature);
    let direction = |l: ArrayView2<'_, f64>| -> f64 {
        (0..c)
            .map(|i| log_sum_exp(&l.row(i).to_vec()) - l[[i, i]])
            .sum::<f64>()
            / c as f64
    };
    Ok(0.5 * (direction(logits.view()) + direction(logits.t())))
}

/// CLIP loss on the batch's global embeddings plus `lambda` times the
/// triplet loss on an exact or approximated similarity matrix.
pub fn total_loss(batch: &MiniBatch, similarity: &ArrayView2<'_, f64>, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let images: Vec<Vec<f64>> = batch.pairs().iter().map(|(i, _)| i.global.clone()).collect();
    let texts: Vec<Vec<f64>> = batch.pairs().iter().map(|(_, t)| t.global.clone()).collect();
    Ok(clip_loss(&images, &texts, cfg.clip_temperature)? + cfg.lambda * triplet_loss(similarity, cfg.gamma)?)
}
