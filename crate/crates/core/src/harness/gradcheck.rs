//! Finite-difference check of the aggregator backward pass composed with the
//! triplet-loss subgradient.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{gen_synthetic_batch, InstanceDistribution};
use crate::error::{Error, Result};
use crate::loss::{total_loss, triplet_loss_grad, LossConfig};
use crate::nla::{nla, nla_backward, Activation, NlaConfig, S0Gradient};
use crate::similarity::{compute_s0, SimilarityTensor};
use crate::tree::NodeSetPolicy;

/// Gradients smaller than this are compared in absolute terms. Central
/// differences at step `1e-5` on an `O(1)` loss carry roughly `1e-10` of
/// rounding noise, so smaller entries cannot be resolved relatively.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckOptions {
    /// Aggregators summed into the approximated similarity.
    pub aggregators: Vec<NlaConfig>,
    pub loss: LossConfig,
    pub step: f64,
    pub trials: usize,
    pub seed: u64,
    pub distribution: InstanceDistribution,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            aggregators: vec![
                NlaConfig::t1(Activation::Softplus, 0.01),
                NlaConfig::t2(Activation::Tanh, 0.01, 0.75),
            ],
            loss: LossConfig::default(),
            step: 1e-5,
            trials: 100,
            seed: 0,
            distribution: InstanceDistribution::default(),
        }
    }
}

/// Largest disagreement found. `location` is `(trial seed, i, j, m, leaf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub location: Option<(u64, usize, usize, usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn approximate(s0: &SimilarityTensor, spans: &[Vec<std::ops::Range<usize>>], aggs: &[NlaConfig]) -> Result<Array2<f64>> {
    let c = s0.size();
    aggs.iter()
        .try_fold(Array2::zeros((c, c)), |acc, cfg| Ok(acc + nla(s0, spans, cfg)?.s3))
}

/// Analytic gradient of the total loss with respect to `S0`.
pub fn loss_gradient(
    s0: &SimilarityTensor,
    spans: &[Vec<std::ops::Range<usize>>],
    aggs: &[NlaConfig],
    loss: &LossConfig,
) -> Result<S0Gradient> {
    let approx = approximate(s0, spans, aggs)?;
    let upstream = triplet_loss_grad(&approx.view(), loss.gamma)? * loss.lambda;
    let mut grads = aggs
        .iter()
        .map(|cfg| nla_backward(s0, spans, cfg, &upstream.view()))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let first = grads.next().ok_or_else(|| Error::Config("no aggregators".into()))?;
    Ok(grads.fold(first, |acc, g| acc + &g))
}

/// Compares every `S0` entry of every trial against central differences.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    for cfg in &opts.aggregators {
        cfg.validate()?;
    }
    let policy = NodeSetPolicy::all_nodes();
    let per_trial = (0..opts.trials)
        .into_par_iter()
        .map(|t| {
            let seed = opts.seed.wrapping_add(t as u64);
            let batch = gen_synthetic_batch(&opts.distribution.sample(seed))?;
            let s0 = compute_s0(&batch)?;
            let spans = batch.node_spans(&policy);
            let grad = loss_gradient(&s0, &spans, &opts.aggregators, &opts.loss)?;
            let loss_at = |s: &SimilarityTensor| -> Result<f64> {
                total_loss(&batch, &approximate(s, &spans, &opts.aggregators)?.view(), &opts.loss)
            };
            let c = s0.size();
            let mut entries = 0;
            let mut worst = (0.0, None, 0.0, 0.0);
            for i in 0..c {
                for j in 0..c {
                    for m in 0..s0.masks(i) {
                        for leaf in 0..s0.leaves(j) {
                            let up = loss_at(&s0.perturbed(i, j, m, leaf, opts.step))?;
                            let down = loss_at(&s0.perturbed(i, j, m, leaf, -opts.step))?;
                            let numeric = (up - down) / (2.0 * opts.step);
                            let analytic = grad.get(i, j, m, leaf);
                            let err = relative_error(analytic, numeric);
                            entries += 1;
                            if err > worst.0 || worst.1.is_none() {
                                worst = (err, Some((seed, i, j, m, leaf)), analytic, numeric);
                            }
                        }
                    }
                }
            }
            Ok((entries, worst))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = GradcheckReport {
        trials: opts.trials,
        entries: 0,
        max_rel_error: 0.0,
        location: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (entries, (err, location, analytic, numeric)) in per_trial {
        report.entries += entries;
        if err > report.max_rel_error || report.location.is_none() {
            report.max_rel_error = err;
            report.location = location;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
