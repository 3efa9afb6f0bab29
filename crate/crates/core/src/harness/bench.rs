//! Kernel-level scaling of the exact oracle against the fused aggregators.
//!
//! Both kernels start from a precomputed `S0` and run on a single worker
//! thread, so the timings reflect the work per batch rather than scheduling.
//! One batch is drawn with the largest mask count and every row uses a
//! prefix of its masks, so rows differ only in `M`.

use std::mem::size_of;
use std::ops::Range;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::synth::{gen_synthetic_batch, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nla::{s_bar, NlaConfig};
use crate::oracle::{Oracle, DEFAULT_MASK_CAP};
use crate::region::RegionMaskSet;
use crate::similarity::{compute_s0, SimilarityTensor};
use crate::tree::NodeSetPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub batch_size: usize,
    pub tokens: usize,
    pub dim: usize,
    pub grid: (usize, usize),
    pub seed: u64,
    pub mask_cap: usize,
    /// Total timing budget per kernel and mask count.
    pub min_secs: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            batch_size: 4,
            tokens: 8,
            dim: 16,
            grid: (7, 7),
            seed: 0,
            mask_cap: DEFAULT_MASK_CAP,
            min_secs: 0.07,
        }
    }
}

/// One row of the scaling table. Times are seconds per batch; memory is the
/// bytes each kernel allocates per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub masks: usize,
    /// `None` when the oracle refused or was not requested.
    pub exact_secs: Option<f64>,
    pub exact_refused: bool,
    pub nla_secs: f64,
    pub exact_bytes: Option<usize>,
    pub nla_bytes: usize,
}

/// Timing rounds. Each round times every kernel at every mask count once,
/// and the fastest round is reported, so a burst of interference from other
/// processes spoils at most a few rounds of any row.
const TIMING_ROUNDS: u32 = 40;

/// Mean seconds per call over a block lasting at least `budget`.
fn time_block<F: FnMut() -> Result<()>>(budget: Duration, mut f: F) -> Result<f64> {
    let start = Instant::now();
    let mut calls = 0u32;
    while calls == 0 || start.elapsed() < budget {
        f()?;
        calls += 1;
    }
    Ok(start.elapsed().as_secs_f64() / calls as f64)
}

struct Case {
    masks: usize,
    s0: SimilarityTensor,
    spans: Vec<Vec<Range<usize>>>,
    nodes: usize,
    exact_allowed: bool,
    nla_secs: f64,
    exact_secs: f64,
}

pub fn bench_scaling(mask_counts: &[usize], with_exact: bool, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let Some(&largest) = mask_counts.iter().max() else {
        return Ok(Vec::new());
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let oracle = Oracle::new(opts.mask_cap);
    let (cfg_t1, cfg_t2) = (NlaConfig::default_t1(), NlaConfig::default_t2());
    let full = gen_synthetic_batch(&SyntheticSpec {
        batch_size: opts.batch_size,
        grid: opts.grid,
        tokens: opts.tokens,
        dim: opts.dim,
        masks: largest,
        depth_range: (1, usize::MAX),
        seed: opts.seed,
    })?;

    let mut cases = Vec::new();
    for &m in mask_counts {
        let prefixes = full
            .pairs()
            .iter()
            .map(|(image, _)| RegionMaskSet::new(image.masks.patches(), image.masks.masks()[..m].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let batch = full.with_masks(prefixes)?;
        let s0 = compute_s0(&batch)?;
        let spans = batch.node_spans(&NodeSetPolicy::all_nodes());
        let nodes = spans.iter().map(Vec::len).max().unwrap_or(0);
        // Asking the oracle (rather than comparing against the cap here) also
        // serves as a warm-up run.
        let exact_allowed = with_exact
            && match oracle.aggregate(&s0, &spans) {
                Ok(_) => true,
                Err(Error::MaskCapExceeded { .. }) => false,
                Err(e) => return Err(e),
            };
        cases.push(Case {
            masks: m,
            s0,
            spans,
            nodes,
            exact_allowed,
            nla_secs: f64::INFINITY,
            exact_secs: f64::INFINITY,
        });
    }

    let budget = Duration::from_secs_f64(opts.min_secs / TIMING_ROUNDS as f64);
    pool.install(|| -> Result<()> {
        for _ in 0..TIMING_ROUNDS {
            for case in cases.iter_mut() {
                let t = time_block(budget, || s_bar(&case.s0, &case.spans, &cfg_t1, &cfg_t2).map(drop))?;
                case.nla_secs = case.nla_secs.min(t);
                if case.exact_allowed {
                    let t = time_block(budget, || oracle.aggregate(&case.s0, &case.spans).map(drop))?;
                    case.exact_secs = case.exact_secs.min(t);
                }
            }
        }
        Ok(())
    })?;

    let cells = opts.batch_size * opts.batch_size;
    Ok(cases
        .into_iter()
        .map(|c| {
            let refused = with_exact && !c.exact_allowed;
            BenchRow {
                masks: c.masks,
                exact_secs: c.exact_allowed.then_some(c.exact_secs),
                exact_refused: refused,
                nla_secs: c.nla_secs,
                // Per cell: node scores plus running sums and maxima.
                exact_bytes: c
                    .exact_allowed
                    .then_some(cells * (c.masks * c.nodes + 2 * c.nodes) * size_of::<f64>()),
                // Per cell: node scores plus K exponents for T2.
                nla_bytes: cells * (c.masks * c.nodes + c.nodes) * size_of::<f64>(),
            }
        })
        .collect())
}
