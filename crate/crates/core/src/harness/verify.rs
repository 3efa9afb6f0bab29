//! Instance-level inequality and identity checks.
//!
//! Every trial draws a batch from an [`InstanceDistribution`] and evaluates
//! each check on every `(i, j)` cell. Inequalities are tested with a slack of
//! [`FLOAT_SLACK`] times `1 + |bound|` to absorb rounding in the summations.

use std::f64::consts::LN_2;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{gen_synthetic_batch, InstanceDistribution};
use crate::error::Result;
use crate::nla::{generic_cell, t1_cell, t2_cell, Activation, Layers};
use crate::oracle::{
    exponential_sum, exponential_sum_bruteforce, exponential_sum_logcosh, lambda_bound, lambda_smooth,
    max_subset_score, r2t_naive, t2r_naive, Oracle,
};
use crate::region::node_scores_from_block;
use crate::similarity::compute_s0;
use crate::tree::NodeSetPolicy;

pub const FLOAT_SLACK: f64 = 1e-12;

pub const CHECKS: [&str; 12] = [
    "t1_relu_exact",
    "t1_softplus_bound",
    "lse_bound",
    "powerset_sum_identity",
    "t2_bracketing",
    "t2_endpoint_bounds",
    "t2_smooth_bound",
    "t2_generic_matches_fused",
    "t1_monotone_in_tau",
    "gray_code_matches_naive",
    "alpha_grid_closeness",
    "alpha_crossing",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    pub distribution: InstanceDistribution,
    /// Temperatures for the T1 bound and the per-node identities.
    pub taus: Vec<f64>,
    /// Mixing grid for the closeness check.
    pub alphas: Vec<f64>,
    /// Temperature of the T2 endpoint and smooth-bound checks.
    pub endpoint_tau: f64,
    pub alpha_grid_tolerance: f64,
    /// Fraction of trials that must pass the closeness check.
    pub alpha_grid_quantile: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            distribution: InstanceDistribution::default(),
            taus: vec![1.0, 0.1, 0.01, 0.001],
            alphas: (0..=20).map(|k| k as f64 / 20.0).collect(),
            endpoint_tau: 1e-4,
            alpha_grid_tolerance: 0.02,
            alpha_grid_quantile: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub trial: usize,
    pub seed: u64,
    pub cell: (usize, usize),
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    /// Number of trials on which the check ran.
    pub evaluated: usize,
    /// Trials with at least one failing cell.
    pub failed_trials: usize,
    pub passed: bool,
    /// Largest observed value of the checked quantity (error or excess).
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub checks: Vec<CheckSummary>,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn slack(bound: f64) -> f64 {
    FLOAT_SLACK * (1.0 + bound.abs())
}

/// Outcome of one check on one cell: the measured quantity and whether it
/// satisfies the check.
struct Outcome {
    value: f64,
    ok: bool,
    detail: String,
}

fn outcome(value: f64, ok: bool, detail: String) -> Outcome {
    Outcome { value, ok, detail }
}

fn columns(scores: &ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    scores.columns().into_iter().map(|c| c.to_vec()).collect()
}

fn cell_checks(scores: &ArrayView2<'_, f64>, opts: &VerifyOptions) -> Result<Vec<(usize, Outcome)>> {
    let (m, k) = scores.dim();
    let mf = m as f64;
    let log_k = (k as f64).ln();
    let (r2t, t2r) = Oracle::default().cell(scores)?;
    let cols = columns(scores);
    let mut out = Vec::new();

    let relu = t1_cell(scores, Activation::Relu, 1.0);
    let err = (relu - t2r).abs();
    out.push((0, outcome(err, err <= 1e-9, format!("|relu T1 - t2r| = {err:e}"))));

    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    let mut detail = String::new();
    for &tau in &opts.taus {
        let gap = t1_cell(scores, Activation::Softplus, tau) - t2r;
        let bound = tau * mf * LN_2;
        if gap < -slack(t2r) || gap > bound + slack(bound) {
            ok = false;
            detail = format!("tau {tau}: T1 - t2r = {gap:e}, bound {bound:e}");
        }
        worst = worst.max((gap - bound).max(-gap));
    }
    out.push((1, outcome(worst, ok, detail)));

    // LSE bound per node, with brute-force log E.
    let (mut worst, mut ok, mut detail) = (f64::NEG_INFINITY, true, String::new());
    for &tau in &opts.taus {
        for (b, col) in cols.iter().enumerate() {
            let lse = tau * exponential_sum_bruteforce(col, tau)?;
            let top = max_subset_score(col)?;
            let bound = tau * mf * LN_2;
            let excess = (lse - top - bound).max(top - lse);
            if lse - top < -slack(top) || lse - top > bound + slack(lse) {
                ok = false;
                detail = format!("tau {tau}, node {b}: tau log E - max = {:e}", lse - top);
            }
            worst = worst.max(excess);
        }
    }
    out.push((2, outcome(worst, ok, detail)));

    // Powerset-sum identity and the product expansion used by T1.
    let (mut worst, mut ok, mut detail) = (0.0f64, true, String::new());
    for &tau in &opts.taus {
        for (b, col) in cols.iter().enumerate() {
            let brute = exponential_sum_bruteforce(col, tau)?;
            let scale = brute.abs().max(1.0);
            let rel = (exponential_sum_logcosh(col, tau) - brute).abs() / scale;
            let rel_sp = (exponential_sum(col, tau) - brute).abs() / scale;
            worst = worst.max(rel).max(rel_sp);
            if rel > 1e-8 || rel_sp > 1e-8 {
                ok = false;
                detail = format!("tau {tau}, node {b}: relative {rel:e} / {rel_sp:e}");
            }
        }
    }
    out.push((3, outcome(worst, ok, detail)));

    let lo = lambda_bound(scores, 0.0)?;
    let hi = lambda_bound(scores, 1.0)?;
    let excess = (lo - r2t).max(r2t - hi);
    out.push((
        4,
        outcome(
            excess,
            r2t >= lo - slack(lo) && r2t <= hi + slack(hi),
            format!("Lambda(0) = {lo}, r2t = {r2t}, Lambda(1) = {hi}"),
        ),
    ));

    let tau = opts.endpoint_tau;
    let bound = tau * (mf * LN_2 + log_k);
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    let mut detail = String::new();
    for (alpha, lam) in [(0.0, lo), (1.0, hi)] {
        let err = (t2_cell(scores, Activation::Tanh, tau, alpha)? - lam).abs();
        worst = worst.max(err - bound);
        if err > bound + slack(lam) {
            ok = false;
            detail = format!("alpha {alpha}: |T2 - Lambda| = {err:e} > {bound:e}");
        }
    }
    out.push((5, outcome(worst, ok, detail)));

    // Two-sided bound on the smoothed maximum recovered from the fused output,
    // cross-checked against the brute-force construction.
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    let mut detail = String::new();
    for &alpha in &[0.0, 0.25, 0.5, 0.75, 1.0] {
        let z = alpha * mf * LN_2 + (1.0 - alpha) * log_k;
        let smooth = t2_cell(scores, Activation::Tanh, tau, alpha)? + tau * z;
        let brute = lambda_smooth(scores, tau, alpha)?;
        let lam = lambda_bound(scores, alpha)?;
        let upper = lam + tau * (alpha * mf * LN_2 + log_k);
        let identity = (smooth - brute).abs() / brute.abs().max(1.0);
        worst = worst.max((lam - smooth).max(smooth - upper));
        if smooth < lam - slack(lam) || smooth > upper + slack(upper) || identity > 1e-9 {
            ok = false;
            detail = format!("alpha {alpha}: Lambda {lam}, smooth {smooth}, upper {upper}, identity {identity:e}");
        }
    }
    out.push((6, outcome(worst, ok, detail)));

    let (mut worst, mut ok, mut detail) = (0.0f64, true, String::new());
    for &tau in opts.taus.iter().filter(|&&t| t >= 0.1) {
        for &alpha in &[0.0, 0.5, 1.0] {
            let fused = t2_cell(scores, Activation::Tanh, tau, alpha)?;
            let generic = generic_cell(scores, &Layers::t2(Activation::Tanh, tau, alpha)?)?;
            let rel = (generic - fused).abs() / fused.abs().max(1.0);
            worst = worst.max(rel);
            if rel > 1e-8 {
                ok = false;
                detail = format!("tau {tau}, alpha {alpha}: relative {rel:e}");
            }
        }
    }
    out.push((7, outcome(worst, ok, detail)));

    let mut taus = opts.taus.clone();
    taus.sort_by(f64::total_cmp);
    let values: Vec<f64> = taus.iter().map(|&t| t1_cell(scores, Activation::Softplus, t)).collect();
    let drop = values.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    out.push((
        8,
        outcome(drop, drop <= slack(values[0]), format!("T1 decreased by {drop:e} as tau grew")),
    ));

    if m <= 12 {
        let err = (r2t - r2t_naive(scores)).abs().max((t2r - t2r_naive(scores)).abs());
        out.push((9, outcome(err, err <= 1e-12 * (1.0 + r2t.abs()), format!("Gray vs naive {err:e}"))));
    }

    let mut best = f64::INFINITY;
    for &alpha in &opts.alphas {
        best = best.min((t2_cell(scores, Activation::Tanh, tau, alpha)? - r2t).abs());
    }
    out.push((
        10,
        outcome(best, best <= opts.alpha_grid_tolerance, format!("min over alpha grid |T2 - r2t| = {best}")),
    ));

    // T2 is nondecreasing in alpha, sits at or below Lambda(0) <= r2t at
    // alpha = 0 and within tau M log 2 of Lambda(1) >= r2t at alpha = 1, so
    // bisection finds an alpha within that distance of r2t.
    let t2 = |alpha: f64| t2_cell(scores, Activation::Tanh, tau, alpha);
    let (mut a, mut b) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if t2(mid)? < r2t {
            a = mid;
        } else {
            b = mid;
        }
    }
    let err = (t2(a)? - r2t).abs().min((t2(b)? - r2t).abs());
    let bound = tau * mf * LN_2;
    out.push((
        11,
        outcome(err - bound, err <= bound + slack(r2t), format!("best alpha {a}: |T2 - r2t| = {err:e} > {bound:e}")),
    ));
    Ok(out)
}

/// Node score matrix of one `(i, j)` cell.
pub type Cell = ((usize, usize), Array2<f64>);

/// Per-cell node score matrices of one trial.
pub fn trial_cells(distribution: &InstanceDistribution, seed: u64) -> Result<Vec<Cell>> {
    let batch = gen_synthetic_batch(&distribution.sample(seed))?;
    let s0 = compute_s0(&batch)?;
    let spans = batch.node_spans(&NodeSetPolicy::all_nodes());
    let c = s0.size();
    Ok((0..c * c)
        .map(|cell| {
            let (i, j) = (cell / c, cell % c);
            ((i, j), node_scores_from_block(&s0.block(i, j), &spans[j]))
        })
        .collect())
}

/// Runs every check over `opts.trials` trials; trial `t` uses seed
/// `opts.seed + t`.
pub fn verify_bounds(opts: &VerifyOptions) -> Result<VerifyReport> {
    let per_trial = (0..opts.trials)
        .into_par_iter()
        .map(|t| {
            let seed = opts.seed.wrapping_add(t as u64);
            let mut results = Vec::new();
            for (cell, scores) in trial_cells(&opts.distribution, seed)? {
                for (check, o) in cell_checks(&scores.view(), opts)? {
                    results.push((check, cell, o));
                }
            }
            Ok((t, seed, results))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut checks: Vec<CheckSummary> = CHECKS
        .iter()
        .map(|name| CheckSummary {
            name: name.to_string(),
            evaluated: 0,
            failed_trials: 0,
            passed: true,
            worst: f64::NEG_INFINITY,
        })
        .collect();
    let mut violations = Vec::new();
    for (trial, seed, results) in per_trial {
        let mut seen = [false; CHECKS.len()];
        let mut failed = [false; CHECKS.len()];
        for (check, cell, o) in results {
            seen[check] = true;
            checks[check].worst = checks[check].worst.max(o.value);
            if !o.ok {
                failed[check] = true;
                violations.push(Violation {
                    check: CHECKS[check].to_string(),
                    trial,
                    seed,
                    cell,
                    detail: o.detail,
                });
            }
        }
        for k in 0..CHECKS.len() {
            checks[k].evaluated += seen[k] as usize;
            checks[k].failed_trials += failed[k] as usize;
        }
    }
    for (k, summary) in checks.iter_mut().enumerate() {
        summary.passed = if CHECKS[k] == "alpha_grid_closeness" {
            let passing = summary.evaluated - summary.failed_trials;
            passing as f64 >= opts.alpha_grid_quantile * summary.evaluated as f64
        } else {
            summary.failed_trials == 0
        };
    }
    Ok(VerifyReport {
        trials: opts.trials,
        checks,
        violations,
    })
}
