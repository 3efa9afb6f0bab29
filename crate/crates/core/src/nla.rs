//! Non-linear aggregators: linear-time replacements for the powerset sums.
//!
//! An aggregator runs three sum-then-activate layers over the per-mask node
//! scores `Q[m, B]` of each `(i, j)` cell:
//!
//! ```text
//! S1[m, B] = s1( Q[m, B] )
//! S2[B]    = s2( sum_m S1[m, B] )
//! S3       = s3( K^(alpha - 1) * sum_B S2[B] )
//! ```
//!
//! * **T1** (`s1(x) = tau * act(x / tau)`, `s2 = s3 = id`, `alpha = 0`)
//!   tracks the T2R similarity. With softplus the per-node sum is exactly
//!   `tau * log E_B`, so the error is at most `tau * M * log 2`; with ReLU it
//!   is exact.
//! * **T2** (`s1(x) = zeta_alpha(x / (2 tau))`, `s2 = exp`, `s3 = tau * log`)
//!   tracks the R2T similarity, sliding from its lower bound at `alpha = 0`
//!   to its upper bound at `alpha = 1`.
//!
//! T1 and T2 are evaluated by fused kernels. T2 in particular folds layers 2
//! and 3 into a single log-sum-exp, since `exp` of `Q / (2 tau)` overflows for
//! the small temperatures used in practice.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::check_spans;
use crate::region::node_scores_from_block;
use crate::similarity::SimilarityTensor;
use crate::special::{gelu, log_cosh, log_sum_exp, relu, sigmoid, softmax, softplus, std_normal_cdf, swish};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Relu,
    Gelu,
    Swish,
    Tanh,
    Sigmoid,
    Softsign,
}

impl Activation {
    pub const T1: [Activation; 4] = [Self::Softplus, Self::Relu, Self::Gelu, Self::Swish];
    pub const T2: [Activation; 3] = [Self::Tanh, Self::Sigmoid, Self::Softsign];

    pub fn name(self) -> &'static str {
        match self {
            Self::Softplus => "softplus",
            Self::Relu => "relu",
            Self::Gelu => "gelu",
            Self::Swish => "swish",
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Softsign => "softsign",
        }
    }

    /// The activation itself.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Softplus => softplus(x),
            Self::Relu => relu(x),
            Self::Gelu => gelu(x),
            Self::Swish => swish(x),
            Self::Tanh => x.tanh(),
            Self::Sigmoid => sigmoid(x),
            Self::Softsign => x / (1.0 + x.abs()),
        }
    }

    /// Derivative; ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Softplus => sigmoid(x),
            Self::Relu => f64::from(u8::from(x > 0.0)),
            Self::Gelu => {
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                std_normal_cdf(x) + x * pdf
            }
            Self::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Self::Tanh => 1.0 - x.tanh().powi(2),
            Self::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Self::Softsign => 1.0 / (1.0 + x.abs()).powi(2),
        }
    }

    /// Antiderivative shifted to vanish at 0. Defined for the T2 family.
    pub fn antiderivative(self, x: f64) -> Result<f64> {
        match self {
            Self::Tanh => Ok(log_cosh(x)),
            Self::Sigmoid => Ok(softplus(x) - std::f64::consts::LN_2),
            Self::Softsign => Ok(x.abs() - x.abs().ln_1p()),
            other => Err(Error::UnsupportedActivation(other.name().into())),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::T1
            .iter()
            .chain(&Self::T2)
            .copied()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::UnsupportedActivation(s.into()))
    }
}

/// Residual antiderivative `zeta_alpha(x) = x + alpha * int act`, with
/// `zeta_alpha(0) = 0`.
pub fn zeta(act: Activation, alpha: f64, x: f64) -> Result<f64> {
    Ok(x + alpha * act.antiderivative(x)?)
}

/// `d zeta_alpha / dx = 1 + alpha * act(x)`.
pub fn zeta_derivative(act: Activation, alpha: f64, x: f64) -> Result<f64> {
    act.antiderivative(0.0)?;
    Ok(1.0 + alpha * act.eval(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    T1,
    T2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlaConfig {
    pub variant: Variant,
    pub activation: Activation,
    pub tau: f64,
    pub alpha: f64,
}

impl NlaConfig {
    /// T1 configuration; `alpha` is fixed at 0.
    pub fn t1(activation: Activation, tau: f64) -> Self {
        Self {
            variant: Variant::T1,
            activation,
            tau,
            alpha: 0.0,
        }
    }

    pub fn t2(activation: Activation, tau: f64, alpha: f64) -> Self {
        Self {
            variant: Variant::T2,
            activation,
            tau,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        let allowed: &[Activation] = match self.variant {
            Variant::T1 => &Activation::T1,
            Variant::T2 => &Activation::T2,
        };
        if !allowed.contains(&self.activation) {
            return Err(Error::UnsupportedActivation(format!(
                "{} for {:?}",
                self.activation, self.variant
            )));
        }
        if self.variant == Variant::T1 && self.alpha != 0.0 {
            return Err(Error::Config("T1 aggregators use alpha = 0".into()));
        }
        Ok(())
    }

    /// Softplus T1 at `tau = 0.001`.
    pub fn default_t1() -> Self {
        Self::t1(Activation::Softplus, 1e-3)
    }

    /// Tanh T2 at `tau = 0.001`, `alpha = 0.75`.
    pub fn default_t2() -> Self {
        Self::t2(Activation::Tanh, 1e-3, 0.75)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlaOutput {
    pub s3: Array2<f64>,
}

/// T1 on one cell.
pub fn t1_cell(scores: &ArrayView2<'_, f64>, act: Activation, tau: f64) -> f64 {
    let nodes = scores.ncols();
    let total: f64 = scores
        .columns()
        .into_iter()
        .map(|col| {
            col.iter()
                .map(|&q| match act {
                    // Positively homogeneous: skip the tau round-trip.
                    Activation::Relu => relu(q),
                    _ => tau * act.eval(q / tau),
                })
                .sum::<f64>()
        })
        .sum();
    total / nodes as f64
}

/// Per-node exponents `u_B = sum_m zeta_alpha(Q[m, B] / (2 tau))`.
fn t2_exponents(scores: &ArrayView2<'_, f64>, act: Activation, tau: f64, alpha: f64) -> Result<Vec<f64>> {
    scores
        .columns()
        .into_iter()
        .map(|col| col.iter().map(|&q| zeta(act, alpha, q / (2.0 * tau))).sum())
        .collect()
}

/// T2 on one cell: `tau * (LSE_B(u_B) - (1 - alpha) log K)`.
pub fn t2_cell(scores: &ArrayView2<'_, f64>, act: Activation, tau: f64, alpha: f64) -> Result<f64> {
    let u = t2_exponents(scores, act, tau, alpha)?;
    Ok(tau * (log_sum_exp(&u) - (1.0 - alpha) * (u.len() as f64).ln()))
}

/// Layer activations for the unfused three-layer form.
pub struct Layers<'a> {
    pub sigma1: Box<dyn Fn(f64) -> f64 + Send + Sync + 'a>,
    pub sigma2: Box<dyn Fn(f64) -> f64 + Send + Sync + 'a>,
    pub sigma3: Box<dyn Fn(f64) -> f64 + Send + Sync + 'a>,
    pub alpha: f64,
}

impl Layers<'static> {
    /// Literal T1 layers.
    pub fn t1(act: Activation, tau: f64) -> Self {
        Self {
            sigma1: Box::new(move |x| tau * act.eval(x / tau)),
            sigma2: Box::new(|x| x),
            sigma3: Box::new(|x| x),
            alpha: 0.0,
        }
    }

    /// Literal T2 layers: `exp` and `tau * log` with no stabilisation.
    pub fn t2(act: Activation, tau: f64, alpha: f64) -> Result<Self> {
        act.antiderivative(0.0)?;
        Ok(Self {
            sigma1: Box::new(move |x| x / (2.0 * tau) + alpha * act.antiderivative(x / (2.0 * tau)).unwrap_or(f64::NAN)),
            sigma2: Box::new(f64::exp),
            sigma3: Box::new(move |x| tau * x.ln()),
            alpha,
        })
    }
}

/// Unfused three-layer evaluation of one cell. Reports the first layer that
/// produces a non-finite value.
pub fn generic_cell(scores: &ArrayView2<'_, f64>, layers: &Layers<'_>) -> Result<f64> {
    let nodes = scores.ncols();
    let mut layer3_in = 0.0;
    for col in scores.columns() {
        let mut layer2_in = 0.0;
        for &q in col {
            let s1 = (layers.sigma1)(q);
            if !s1.is_finite() {
                return Err(Error::LayerOverflow { layer: 1 });
            }
            layer2_in += s1;
        }
        let s2 = (layers.sigma2)(layer2_in);
        if !s2.is_finite() {
            return Err(Error::LayerOverflow { layer: 2 });
        }
        layer3_in += s2;
    }
    let s3 = (layers.sigma3)((nodes as f64).powf(layers.alpha - 1.0) * layer3_in);
    if !s3.is_finite() {
        return Err(Error::LayerOverflow { layer: 3 });
    }
    Ok(s3)
}

fn map_cells<F>(s0: &SimilarityTensor, node_spans: &[Vec<Range<usize>>], f: F) -> Result<Array2<f64>>
where
    F: Fn(&ArrayView2<'_, f64>) -> Result<f64> + Sync,
{
    check_spans(s0, node_spans)?;
    let c = s0.size();
    let values = (0..c * c)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / c, cell % c);
            f(&node_scores_from_block(&s0.block(i, j), &node_spans[j]).view())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Array2::from_shape_vec((c, c), values).expect("c * c cells"))
}

/// Three-layer aggregator with arbitrary activations.
pub fn nla_generic(s0: &SimilarityTensor, node_spans: &[Vec<Range<usize>>], layers: &Layers<'_>) -> Result<NlaOutput> {
    map_cells(s0, node_spans, |s| generic_cell(s, layers)).map(|s3| NlaOutput { s3 })
}

/// T1 aggregator (tracks T2R).
pub fn nla_t1(s0: &SimilarityTensor, node_spans: &[Vec<Range<usize>>], act: Activation, tau: f64) -> Result<NlaOutput> {
    NlaConfig::t1(act, tau).validate()?;
    map_cells(s0, node_spans, |s| Ok(t1_cell(s, act, tau))).map(|s3| NlaOutput { s3 })
}

/// T2 aggregator (tracks R2T), fused in log space.
pub fn nla_t2(
    s0: &SimilarityTensor,
    node_spans: &[Vec<Range<usize>>],
    act: Activation,
    tau: f64,
    alpha: f64,
) -> Result<NlaOutput> {
    NlaConfig::t2(act, tau, alpha).validate()?;
    map_cells(s0, node_spans, |s| t2_cell(s, act, tau, alpha)).map(|s3| NlaOutput { s3 })
}

/// Runs the aggregator selected by `cfg`.
pub fn nla(s0: &SimilarityTensor, node_spans: &[Vec<Range<usize>>], cfg: &NlaConfig) -> Result<NlaOutput> {
    match cfg.variant {
        Variant::T1 => nla_t1(s0, node_spans, cfg.activation, cfg.tau),
        Variant::T2 => nla_t2(s0, node_spans, cfg.activation, cfg.tau, cfg.alpha),
    }
}

/// `Sbar = T1(S0) + T2(S0)`, the approximation of `Qbar`.
pub fn s_bar(
    s0: &SimilarityTensor,
    node_spans: &[Vec<Range<usize>>],
    cfg_t1: &NlaConfig,
    cfg_t2: &NlaConfig,
) -> Result<Array2<f64>> {
    if cfg_t1.variant != Variant::T1 || cfg_t2.variant != Variant::T2 {
        return Err(Error::Config("s_bar needs one T1 and one T2 configuration".into()));
    }
    Ok(nla(s0, node_spans, cfg_t1)?.s3 + nla(s0, node_spans, cfg_t2)?.s3)
}

/// Gradient of an aggregator with respect to `S0`, one block per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct S0Gradient {
    size: usize,
    blocks: Vec<Array2<f64>>,
}

impl S0Gradient {
    pub fn block(&self, i: usize, j: usize) -> ArrayView2<'_, f64> {
        self.blocks[i * self.size + j].view()
    }

    pub fn get(&self, i: usize, j: usize, m: usize, leaf: usize) -> f64 {
        self.blocks[i * self.size + j][[m, leaf]]
    }

    pub fn size(&self) -> usize {
        self.size
    }

}

impl std::ops::Add<&S0Gradient> for S0Gradient {
    type Output = S0Gradient;

    fn add(mut self, other: &S0Gradient) -> S0Gradient {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            *a += b;
        }
        self
    }
}

/// Derivative of one cell's output with respect to `Q[m, B]`.
fn cell_node_grad(scores: &ArrayView2<'_, f64>, cfg: &NlaConfig) -> Result<Array2<f64>> {
    let (_, nodes) = scores.dim();
    let (tau, alpha, act) = (cfg.tau, cfg.alpha, cfg.activation);
    match cfg.variant {
        Variant::T1 => Ok(scores.mapv(|q| act.derivative(q / tau) / nodes as f64)),
        Variant::T2 => {
            let weights = softmax(&t2_exponents(scores, act, tau, alpha)?);
            let mut g = Array2::zeros(scores.dim());
            for ((m, b), &q) in scores.indexed_iter() {
                // d/dq of tau * zeta(q / 2tau) is zeta' / 2.
                g[[m, b]] = weights[b] * zeta_derivative(act, alpha, q / (2.0 * tau))? / 2.0;
            }
            Ok(g)
        }
    }
}

/// Backward pass of the fused aggregators: `upstream[i, j] * dS3[i, j] / dS0`.
pub fn nla_backward(
    s0: &SimilarityTensor,
    node_spans: &[Vec<Range<usize>>],
    cfg: &NlaConfig,
    upstream: &ArrayView2<'_, f64>,
) -> Result<S0Gradient> {
    cfg.validate()?;
    check_spans(s0, node_spans)?;
    let c = s0.size();
    if upstream.dim() != (c, c) {
        return Err(Error::DimensionMismatch {
            expected: c * c,
            found: upstream.len(),
        });
    }
    let blocks = (0..c * c)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / c, cell % c);
            let block = s0.block(i, j);
            let mut grad = Array2::zeros(block.dim());
            let up = upstream[[i, j]];
            if up == 0.0 {
                return Ok(grad);
            }
            let spans = &node_spans[j];
            let node_grad = cell_node_grad(&node_scores_from_block(&block, spans).view(), cfg)?;
            // Each leaf feeds every node whose span covers it.
            for (b, span) in spans.iter().enumerate() {
                for leaf in span.clone() {
                    for m in 0..block.nrows() {
                        grad[[m, leaf]] += up * node_grad[[m, b]];
                    }
                }
            }
            Ok(grad)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(S0Gradient { size: c, blocks })
}

/// Backward pass of [`s_bar`].
pub fn s_bar_backward(
    s0: &SimilarityTensor,
    node_spans: &[Vec<Range<usize>>],
    cfg_t1: &NlaConfig,
    cfg_t2: &NlaConfig,
    upstream: &ArrayView2<'_, f64>,
) -> Result<S0Gradient> {
    let g1 = nla_backward(s0, node_spans, cfg_t1, upstream)?;
    let g2 = nla_backward(s0, node_spans, cfg_t2, upstream)?;
    Ok(g1 + &g2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{lambda_bound, r2t_exact, t2r_exact};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::f64::consts::LN_2;

    #[test]
    fn zeta_examples() {
        for act in Activation::T2 {
            for alpha in [0.0, 0.3, 1.0] {
                assert_eq!(zeta(act, alpha, 0.0).unwrap(), 0.0);
            }
        }
        for x in [0.1, 1.7, 40.0, 900.0] {
            let plus = zeta(Activation::Tanh, 1.0, x).unwrap() - x;
            let minus = zeta(Activation::Tanh, 1.0, -x).unwrap() + x;
            assert_abs_diff_eq!(plus, minus, epsilon = 1e-12);
        }
        // log cosh 2 = 1.325_002_747...
        let v = zeta(Activation::Tanh, 0.5, 2.0).unwrap();
        assert_abs_diff_eq!(v, 2.0 + 0.5 * 2f64.cosh().ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(v, 2.6625, epsilon = 1e-4);
        assert!(zeta(Activation::Relu, 0.5, 1.0).is_err());
    }

    #[test]
    fn zeta_derivative_matches_finite_difference() {
        for act in Activation::T2 {
            for x in [-3.0, -0.2, 0.7, 5.0] {
                let h = 1e-6;
                let fd = (zeta(act, 0.6, x + h).unwrap() - zeta(act, 0.6, x - h).unwrap()) / (2.0 * h);
                assert_abs_diff_eq!(zeta_derivative(act, 0.6, x).unwrap(), fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn activation_derivatives_match_finite_difference() {
        for act in Activation::T1.iter().chain(&Activation::T2) {
            for x in [-2.5, -0.4, 0.3, 1.9] {
                let h = 1e-6;
                let fd = (act.eval(x + h) - act.eval(x - h)) / (2.0 * h);
                let tol = if *act == Activation::Gelu { 1e-6 } else { 1e-8 };
                assert_abs_diff_eq!(act.derivative(x), fd, epsilon = tol);
            }
        }
    }

    #[test]
    fn t1_examples() {
        assert_eq!(t1_cell(&array![[0.5]].view(), Activation::Relu, 1e-3), 0.5);
        assert_eq!(t1_cell(&array![[-0.3]].view(), Activation::Relu, 1e-3), 0.0);
        let s = array![[0.5, 0.1], [-0.3, 0.4]];
        let exact = t2r_exact(&s.view()).unwrap();
        let soft = t1_cell(&s.view(), Activation::Softplus, 1e-3);
        assert!(soft >= exact && soft - exact <= 1e-3 * 2.0 * LN_2);
        assert_abs_diff_eq!(2e-3 * LN_2, 0.00139, epsilon = 1e-5);
    }

    #[test]
    fn t2_examples() {
        let s = array![[0.5], [-0.3]];
        let lo = t2_cell(&s.view(), Activation::Tanh, 1e-3, 0.0).unwrap();
        let hi = t2_cell(&s.view(), Activation::Tanh, 1e-3, 1.0).unwrap();
        assert_abs_diff_eq!(lo, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 0.5, epsilon = 2e-3 * LN_2 + 1e-12);
        assert_abs_diff_eq!(lo, r2t_exact(&s.view()).unwrap(), epsilon = 1e-12);

        let s = array![[0.5, 0.1], [-0.3, 0.4]];
        let exact = r2t_exact(&s.view()).unwrap();
        assert_abs_diff_eq!(exact, 0.35, epsilon = 1e-15);
        let lo = t2_cell(&s.view(), Activation::Tanh, 1e-3, 0.0).unwrap();
        let hi = t2_cell(&s.view(), Activation::Tanh, 1e-3, 1.0).unwrap();
        assert!(lo <= exact && exact <= hi, "{lo} {exact} {hi}");
        assert_abs_diff_eq!(lo, lambda_bound(&s.view(), 0.0).unwrap(), epsilon = 1e-3 * 2f64.ln() + 1e-12);
    }

    #[test]
    fn generic_matches_fused_and_reports_overflow() {
        let s = array![[0.5, 0.1], [-0.3, 0.4], [0.2, -0.6]];
        for act in Activation::T2 {
            let fused = t2_cell(&s.view(), act, 0.1, 0.75).unwrap();
            let generic = generic_cell(&s.view(), &Layers::t2(act, 0.1, 0.75).unwrap()).unwrap();
            assert_abs_diff_eq!(fused, generic, epsilon = 1e-12);
        }
        let fused = t1_cell(&s.view(), Activation::Softplus, 0.1);
        let generic = generic_cell(&s.view(), &Layers::t1(Activation::Softplus, 0.1)).unwrap();
        assert_abs_diff_eq!(fused, generic, epsilon = 1e-15);

        let big = Array2::from_elem((12, 1), 1.0);
        let err = generic_cell(&big.view(), &Layers::t2(Activation::Tanh, 1e-3, 0.0).unwrap()).unwrap_err();
        assert_eq!(err, Error::LayerOverflow { layer: 2 });
        assert!(t2_cell(&big.view(), Activation::Tanh, 1e-3, 0.0).unwrap().is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(NlaConfig::t1(Activation::Tanh, 0.1).validate().is_err());
        assert!(NlaConfig::t2(Activation::Relu, 0.1, 0.5).validate().is_err());
        assert!(NlaConfig::t2(Activation::Tanh, 0.0, 0.5).validate().is_err());
        assert!(NlaConfig::t2(Activation::Tanh, 0.1, 1.5).validate().is_err());
        assert!(NlaConfig::default_t1().validate().is_ok());
        assert!(NlaConfig::default_t2().validate().is_ok());
        assert_eq!("SoftPlus".parse::<Activation>().unwrap(), Activation::Softplus);
        assert!("mish".parse::<Activation>().is_err());
    }
}
