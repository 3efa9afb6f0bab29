use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::pearson;
use super::synth::{gen_synthetic_batch, SyntheticSpec};
use crate::error::Result;
use crate::loss::phi_gamma;
use crate::nla::{s_bar, Activation, NlaConfig};
use crate::oracle::aggregate_exact;
use crate::similarity::compute_s0;
use crate::tree::NodeSetPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    pub taus: Vec<f64>,
    pub alphas: Vec<f64>,
    pub batches: usize,
    pub gamma: f64,
    pub t1_activation: Activation,
    pub t2_activation: Activation,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            taus: vec![0.1, 0.01, 0.001],
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            batches: 200,
            gamma: 0.2,
            t1_activation: Activation::Softplus,
            t2_activation: Activation::Tanh,
        }
    }
}

/// One `(tau, alpha)` point. Losses are means over batches of
/// `Phi(X) + Phi(X^T)`; correlations are taken separately for the row term
/// `Phi(X)` and the column term `Phi(X^T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub alpha: f64,
    pub exact_loss: f64,
    pub approx_loss: f64,
    /// The smaller of the row-term and column-term correlations.
    pub pearson_r: f64,
    pub pearson_rows: f64,
    pub pearson_cols: f64,
    /// Correlation of the summed loss `Phi(X) + Phi(X^T)`.
    pub pearson_total: f64,
    /// Largest `|exact - approx|` over batches and both terms.
    pub max_abs_err: f64,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

fn terms(x: &Array2<f64>, gamma: f64) -> Result<(f64, f64)> {
    Ok((phi_gamma(&x.view(), gamma)?, phi_gamma(&x.t(), gamma)?))
}

/// Exact versus `Sbar`-approximated triplet terms over `opts.batches`
/// batches. Batch `b` uses seed `spec.seed + b`.
pub fn correlation_sweep(spec: &SyntheticSpec, opts: &SweepOptions) -> Result<SweepResult> {
    spec.validate()?;
    let policy = NodeSetPolicy::all_nodes();
    let inputs = (0..opts.batches as u64)
        .into_par_iter()
        .map(|b| {
            let batch = gen_synthetic_batch(&spec.with_seed(spec.seed.wrapping_add(b)))?;
            let s0 = compute_s0(&batch)?;
            let spans = batch.node_spans(&policy);
            let exact = terms(&aggregate_exact(&s0, &spans)?.q_bar, opts.gamma)?;
            Ok((s0, spans, exact))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &tau in &opts.taus {
        for &alpha in &opts.alphas {
            let cfg_t1 = NlaConfig::t1(opts.t1_activation, tau);
            let cfg_t2 = NlaConfig::t2(opts.t2_activation, tau, alpha);
            cfg_t1.validate()?;
            cfg_t2.validate()?;
            let start = Instant::now();
            let approx = inputs
                .par_iter()
                .map(|(s0, spans, _)| terms(&s_bar(s0, spans, &cfg_t1, &cfg_t2)?, opts.gamma))
                .collect::<Result<Vec<_>>>()?;
            let runtime_secs = start.elapsed().as_secs_f64();

            let exact: Vec<(f64, f64)> = inputs.iter().map(|x| x.2).collect();
            let pick = |v: &[(f64, f64)], col: bool| -> Vec<f64> {
                v.iter().map(|t| if col { t.1 } else { t.0 }).collect()
            };
            let pearson_rows = pearson(&pick(&exact, false), &pick(&approx, false))?;
            let pearson_cols = pearson(&pick(&exact, true), &pick(&approx, true))?;
            let total = |v: &[(f64, f64)]| -> Vec<f64> { v.iter().map(|t| t.0 + t.1).collect() };
            let pearson_total = pearson(&total(&exact), &total(&approx))?;
            let n = exact.len() as f64;
            let max_abs_err = exact
                .iter()
                .zip(&approx)
                .map(|(e, a)| (e.0 - a.0).abs().max((e.1 - a.1).abs()))
                .fold(0.0, f64::max);
            rows.push(SweepRow {
                tau,
                alpha,
                exact_loss: exact.iter().map(|t| t.0 + t.1).sum::<f64>() / n,
                approx_loss: approx.iter().map(|t| t.0 + t.1).sum::<f64>() / n,
                pearson_r: pearson_rows.min(pearson_cols),
                pearson_rows,
                pearson_cols,
                pearson_total,
                max_abs_err,
                runtime_secs,
            });
        }
    }
    Ok(SweepResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_is_deterministic_and_bounded() {
        let spec = SyntheticSpec {
            masks: 4,
            tokens: 3,
            ..SyntheticSpec::default()
        };
        let opts = SweepOptions {
            taus: vec![0.01],
            alphas: vec![0.0, 1.0],
            batches: 12,
            ..SweepOptions::default()
        };
        let a = correlation_sweep(&spec, &opts).unwrap();
        let b = correlation_sweep(&spec, &opts).unwrap();
        assert_eq!(a.rows.len(), 2);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.pearson_r, y.pearson_r);
            assert_eq!(x.exact_loss, y.exact_loss);
            assert!((-1.0..=1.0).contains(&x.pearson_r));
        }
    }
}
