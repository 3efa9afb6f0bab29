//! Exact powerset aggregation.
//!
//! Everything here costs `O(2^M)` per cell and is the ground truth the
//! approximations in [`crate::nla`] are checked against. The empty subset is
//! part of the powerset and scores 0.
//!
//! All functions take the `M x K` per-mask node score matrix `Q[m, B]`
//! produced by [`crate::region::per_mask_node_scores`].

use std::f64::consts::LN_2;
use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::region::node_scores_from_block;
use crate::similarity::SimilarityTensor;
use crate::special::{log_sum_exp, softplus};

/// Largest mask count the oracle will enumerate by default.
pub const DEFAULT_MASK_CAP: usize = 20;

/// A subset of the `M` masks, bit `m` set when mask `m` is included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubsetId(pub u64);

impl SubsetId {
    pub const EMPTY: SubsetId = SubsetId(0);

    pub fn contains(self, m: usize) -> bool {
        m < 64 && self.0 >> m & 1 == 1
    }

    /// Member indices below `masks`, ascending.
    pub fn members(self, masks: usize) -> impl Iterator<Item = usize> {
        (0..masks.min(64)).filter(move |&m| self.contains(m))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// `Q_{A,B}`: the subset score, by bilinearity a sum of per-mask scores.
pub fn q_subset(scores: &ArrayView2<'_, f64>, subset: SubsetId, node: usize) -> f64 {
    subset.members(scores.nrows()).fold(0.0, |acc, m| acc + scores[[m, node]])
}

/// Exact R2T, T2R and their sum for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub q_r2t: Array2<f64>,
    pub q_t2r: Array2<f64>,
    pub q_bar: Array2<f64>,
}

/// Exhaustive evaluator with a refusal cap on the number of masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Oracle {
    pub mask_cap: usize,
}

impl Default for Oracle {
    fn default() -> Self {
        Self {
            mask_cap: DEFAULT_MASK_CAP,
        }
    }
}

impl Oracle {
    pub fn new(mask_cap: usize) -> Self {
        Self { mask_cap }
    }

    fn check(&self, masks: usize) -> Result<()> {
        if masks > self.mask_cap || masks >= 64 {
            return Err(Error::MaskCapExceeded {
                masks,
                cap: self.mask_cap.min(63),
            });
        }
        Ok(())
    }

    /// T2R: `(1/K) sum_B max_A Q_{A,B}`.
    pub fn t2r(&self, scores: &ArrayView2<'_, f64>) -> Result<f64> {
        self.check(scores.nrows())?;
        Ok(scan(scores).t2r)
    }

    /// R2T: `2^-M sum_A max_B Q_{A,B}`.
    pub fn r2t(&self, scores: &ArrayView2<'_, f64>) -> Result<f64> {
        self.check(scores.nrows())?;
        Ok(scan(scores).r2t)
    }

    /// Both directions from a single Gray-code pass.
    pub fn cell(&self, scores: &ArrayView2<'_, f64>) -> Result<(f64, f64)> {
        self.check(scores.nrows())?;
        let s = scan(scores);
        Ok((s.r2t, s.t2r))
    }

    /// Full `C x C` exact matrices. `node_spans[j]` lists the leaf spans of
    /// text `j`'s node set.
    pub fn aggregate(&self, s0: &SimilarityTensor, node_spans: &[Vec<Range<usize>>]) -> Result<AggregationResult> {
        let c = s0.size();
        check_spans(s0, node_spans)?;
        for i in 0..c {
            self.check(s0.masks(i))?;
        }
        let cells: Vec<(f64, f64)> = (0..c * c)
            .into_par_iter()
            .map(|cell| {
                let (i, j) = (cell / c, cell % c);
                let scores = node_scores_from_block(&s0.block(i, j), &node_spans[j]);
                let s = scan(&scores.view());
                (s.r2t, s.t2r)
            })
            .collect();
        let q_r2t = Array2::from_shape_fn((c, c), |(i, j)| cells[i * c + j].0);
        let q_t2r = Array2::from_shape_fn((c, c), |(i, j)| cells[i * c + j].1);
        let q_bar = &q_r2t + &q_t2r;
        Ok(AggregationResult { q_r2t, q_t2r, q_bar })
    }
}

pub(crate) fn check_spans(s0: &SimilarityTensor, node_spans: &[Vec<Range<usize>>]) -> Result<()> {
    if node_spans.len() != s0.size() {
        return Err(Error::DimensionMismatch {
            expected: s0.size(),
            found: node_spans.len(),
        });
    }
    for (j, spans) in node_spans.iter().enumerate() {
        if spans.is_empty() {
            return Err(Error::Config(format!("text {j} has an empty node set")));
        }
        if let Some(bad) = spans.iter().find(|r| r.is_empty() || r.end > s0.leaves(j)) {
            return Err(Error::Config(format!(
                "text {j} node span {bad:?} is outside its {} leaves",
                s0.leaves(j)
            )));
        }
    }
    Ok(())
}

/// Convenience wrappers with the default cap.
pub fn t2r_exact(scores: &ArrayView2<'_, f64>) -> Result<f64> {
    Oracle::default().t2r(scores)
}

pub fn r2t_exact(scores: &ArrayView2<'_, f64>) -> Result<f64> {
    Oracle::default().r2t(scores)
}

pub fn aggregate_exact(s0: &SimilarityTensor, node_spans: &[Vec<Range<usize>>]) -> Result<AggregationResult> {
    Oracle::default().aggregate(s0, node_spans)
}

struct Scan {
    r2t: f64,
    t2r: f64,
}

/// Gray-code walk over all `2^M` subsets. Consecutive subsets differ by one
/// mask, so each step updates the `K` running subset scores in `O(K)`.
fn scan(scores: &ArrayView2<'_, f64>) -> Scan {
    let (masks, nodes) = scores.dim();
    let mut sums = vec![0.0; nodes];
    // The empty subset scores 0 for every node.
    let mut best = vec![0.0f64; nodes];
    let mut total = 0.0;
    let mut current = 0u64;
    for step in 1u64..(1u64 << masks) {
        let m = step.trailing_zeros() as usize;
        current ^= 1 << m;
        let row = scores.row(m);
        let mut top = f64::NEG_INFINITY;
        if current >> m & 1 == 1 {
            for ((s, b), q) in sums.iter_mut().zip(best.iter_mut()).zip(row) {
                *s += q;
                *b = b.max(*s);
                top = top.max(*s);
            }
        } else {
            for ((s, b), q) in sums.iter_mut().zip(best.iter_mut()).zip(row) {
                *s -= q;
                *b = b.max(*s);
                top = top.max(*s);
            }
        }
        total += top;
    }
    Scan {
        r2t: total / (1u64 << masks) as f64,
        t2r: best.iter().sum::<f64>() / nodes as f64,
    }
}

/// Reference T2R that rebuilds every subset score from scratch.
pub fn t2r_naive(scores: &ArrayView2<'_, f64>) -> f64 {
    let (masks, nodes) = scores.dim();
    let sum: f64 = (0..nodes)
        .map(|b| {
            (0..1u64 << masks)
                .map(|a| q_subset(scores, SubsetId(a), b))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    sum / nodes as f64
}

/// Reference R2T that rebuilds every subset score from scratch.
pub fn r2t_naive(scores: &ArrayView2<'_, f64>) -> f64 {
    let (masks, nodes) = scores.dim();
    let sum: f64 = (0..1u64 << masks)
        .map(|a| {
            (0..nodes)
                .map(|b| q_subset(scores, SubsetId(a), b))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    sum / (1u64 << masks) as f64
}

/// `max_A Q_{A,B}` by enumeration.
pub fn max_subset_score(column: &[f64]) -> Result<f64> {
    enumerate_subset_scores(column).map(|v| v.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Scores of all `2^M` subsets of one node column, indexed by subset bits.
pub fn enumerate_subset_scores(column: &[f64]) -> Result<Vec<f64>> {
    Oracle::default().check(column.len())?;
    let mut out = vec![0.0; 1 << column.len()];
    for a in 1..out.len() {
        let low = a.trailing_zeros() as usize;
        out[a] = out[a & (a - 1)] + column[low];
    }
    Ok(out)
}

/// `log E_B = log sum_A exp(Q_{A,B} / tau)` through the product expansion
/// `prod_m (1 + exp(q_m / tau))`, i.e. a sum of softplus terms. Linear in `M`.
pub fn exponential_sum(column: &[f64], tau: f64) -> f64 {
    column.iter().map(|&q| softplus(q / tau)).sum()
}

/// `log E_B` by brute-force log-sum-exp over every subset.
pub fn exponential_sum_bruteforce(column: &[f64], tau: f64) -> Result<f64> {
    let scaled: Vec<f64> = enumerate_subset_scores(column)?.into_iter().map(|q| q / tau).collect();
    Ok(log_sum_exp(&scaled))
}

/// Right-hand side of the powerset-summation identity,
/// `M log 2 + Qbar_B / (2 tau) + sum_m log cosh(q_m / (2 tau))`.
pub fn exponential_sum_logcosh(column: &[f64], tau: f64) -> f64 {
    let total: f64 = column.iter().sum();
    column.len() as f64 * LN_2
        + total / (2.0 * tau)
        + column.iter().map(|&q| crate::special::log_cosh(q / (2.0 * tau))).sum::<f64>()
}

/// `Lambda(alpha) = max_B [ (1-alpha)/2 * Qbar_B + alpha * max_A Q_{A,B} ]`.
///
/// `Lambda(0) <= R2T <= Lambda(1)`, and `Lambda` is continuous in `alpha`.
pub fn lambda_bound(scores: &ArrayView2<'_, f64>, alpha: f64) -> Result<f64> {
    let mut out = f64::NEG_INFINITY;
    for column in scores.columns() {
        let column = column.to_vec();
        let total: f64 = column.iter().sum();
        let gamma = (1.0 - alpha) / 2.0 * total + alpha * max_subset_score(&column)?;
        out = out.max(gamma);
    }
    Ok(out)
}

/// `tau * log sum_B exp(Gammabar_B / tau)` with
/// `Gammabar_B = (1-alpha)/2 * Qbar_B + alpha * tau * log E_B`, from brute
/// force `log E_B`.
pub fn lambda_smooth(scores: &ArrayView2<'_, f64>, tau: f64, alpha: f64) -> Result<f64> {
    let mut terms = Vec::with_capacity(scores.ncols());
    for column in scores.columns() {
        let column = column.to_vec();
        let total: f64 = column.iter().sum();
        let gamma = (1.0 - alpha) / 2.0 * total + alpha * tau * exponential_sum_bruteforce(&column, tau)?;
        terms.push(gamma / tau);
    }
    Ok(tau * log_sum_exp(&terms))
}
