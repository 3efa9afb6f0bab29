//! Mini-batches of image/text pairs and the leaf-level similarity tensor
//! `S0[i, j, m, m']`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::embed::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::region::{region_embed, RegionMaskSet};
use crate::tree::{node_token_masks, phrase_embed, NodeSetPolicy, ParseTree, TokenMap};

/// Slack allowed on `|S0| <= 1`, in units of `f64::EPSILON`.
const BOUND_ULPS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub patches: EmbeddingMatrix,
    pub masks: RegionMaskSet,
    pub global: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    pub tokens: EmbeddingMatrix,
    pub tree: ParseTree,
    pub token_map: TokenMap,
    pub global: Vec<f64>,
}

impl TextSample {
    /// Text sample with the identity leaf-to-token map.
    pub fn new(tokens: EmbeddingMatrix, tree: ParseTree, global: Vec<f64>) -> Self {
        let token_map = TokenMap::identity(tree.leaf_count());
        Self {
            tokens,
            tree,
            token_map,
            global,
        }
    }
}

/// `C >= 2` image/text pairs sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pairs: Vec<(ImageSample, TextSample)>,
}

impl MiniBatch {
    pub fn new(pairs: Vec<(ImageSample, TextSample)>) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::BatchTooSmall(pairs.len()));
        }
        let dim = pairs[0].0.patches.dim();
        for (image, text) in &pairs {
            for found in [image.patches.dim(), text.tokens.dim(), image.global.len(), text.global.len()] {
                if found != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found });
                }
            }
            if image.masks.patches() != image.patches.rows() {
                return Err(Error::DimensionMismatch {
                    expected: image.patches.rows(),
                    found: image.masks.patches(),
                });
            }
            // Validates ranges against the token count.
            node_token_masks(&text.tree, text.tokens.rows(), &text.token_map)?;
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].0.patches.dim()
    }

    pub fn pairs(&self) -> &[(ImageSample, TextSample)] {
        &self.pairs
    }

    pub fn image(&self, i: usize) -> &ImageSample {
        &self.pairs[i].0
    }

    pub fn text(&self, j: usize) -> &TextSample {
        &self.pairs[j].1
    }

    pub fn trees(&self) -> Vec<&ParseTree> {
        self.pairs.iter().map(|(_, t)| &t.tree).collect()
    }

    /// Leaf spans of every text's node set under `policy`.
    pub fn node_spans(&self, policy: &NodeSetPolicy) -> Vec<Vec<Range<usize>>> {
        self.pairs.iter().map(|(_, t)| t.tree.node_spans(policy)).collect()
    }

    /// Reorders pairs; `order[k]` is the old index placed at position `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            pairs: order.iter().map(|&k| self.pairs[k].clone()).collect(),
        }
    }

    /// Replaces every image's masks, e.g. with externally produced ones.
    pub fn with_masks(&self, masks: Vec<RegionMaskSet>) -> Result<Self> {
        if masks.len() != self.pairs.len() {
            return Err(Error::Config(format!(
                "{} mask sets for {} images",
                masks.len(),
                self.pairs.len()
            )));
        }
        let pairs = self
            .pairs
            .iter()
            .zip(masks)
            .map(|((image, text), masks)| {
                let image = ImageSample {
                    masks,
                    ..image.clone()
                };
                (image, text.clone())
            })
            .collect();
        Self::new(pairs)
    }
}

/// Leaf-level similarities for every (image, text) cell of a batch.
///
/// Cell `(i, j)` is a dense `M_i x leaves_j` block; the leaf dimension is
/// ragged across texts, so there is no padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    size: usize,
    blocks: Vec<Array2<f64>>,
}

impl SimilarityTensor {
    /// Builds a tensor from row-major cells `blocks[i * size + j]`.
    ///
    /// Blocks in a row share their mask count, blocks in a column their leaf
    /// count, and every score must lie in `[-1, 1]` up to a few ulps.
    pub fn from_blocks(size: usize, blocks: Vec<Array2<f64>>) -> Result<Self> {
        if blocks.len() != size * size {
            return Err(Error::DimensionMismatch {
                expected: size * size,
                found: blocks.len(),
            });
        }
        for i in 0..size {
            for j in 0..size {
                let (m, l) = blocks[i * size + j].dim();
                let (m0, _) = blocks[i * size].dim();
                let (_, l0) = blocks[j].dim();
                if m != m0 || l != l0 {
                    return Err(Error::DimensionMismatch { expected: m0 * l0, found: m * l });
                }
            }
        }
        let limit = 1.0 + BOUND_ULPS * f64::EPSILON;
        if blocks.iter().flatten().any(|s| !s.is_finite() || s.abs() > limit) {
            return Err(Error::NonFinite("similarity tensor (scores must lie in [-1, 1])"));
        }
        Ok(Self { size, blocks })
    }

    /// Batch size `C`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn block(&self, i: usize, j: usize) -> ArrayView2<'_, f64> {
        self.blocks[i * self.size + j].view()
    }

    pub fn get(&self, i: usize, j: usize, m: usize, leaf: usize) -> f64 {
        self.blocks[i * self.size + j][[m, leaf]]
    }

    pub fn masks(&self, i: usize) -> usize {
        self.blocks[i * self.size].nrows()
    }

    pub fn leaves(&self, j: usize) -> usize {
        self.blocks[j].ncols()
    }

    /// Total number of stored scores.
    pub fn entries(&self) -> usize {
        self.blocks.iter().map(Array2::len).sum()
    }

    /// Copy with one score shifted by `delta`, bypassing the `[-1, 1]`
    /// check. Finite-difference probes need to step past the boundary.
    pub fn perturbed(&self, i: usize, j: usize, m: usize, leaf: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.blocks[i * self.size + j][[m, leaf]] += delta;
        out
    }
}

/// `S0[i, j, m, m'] = <phi(I_i | R_m), psi(T_j | P_m')>` over the full
/// `C x C` grid of cells.
pub fn compute_s0(batch: &MiniBatch) -> Result<SimilarityTensor> {
    let dim = batch.dim();
    let phis: Vec<Vec<Vec<f64>>> = batch
        .pairs()
        .par_iter()
        .map(|(image, _)| {
            image
                .masks
                .masks()
                .iter()
                .map(|mask| region_embed(&image.patches, mask))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let psis: Vec<Vec<Vec<f64>>> = batch
        .pairs()
        .par_iter()
        .map(|(_, text)| {
            let masks = node_token_masks(&text.tree, text.tokens.rows(), &text.token_map)?;
            masks
                .leaf_masks
                .iter()
                .map(|m| phrase_embed(&text.tokens, m))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    for v in phis.iter().chain(&psis).flatten() {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
        }
    }
    let c = batch.len();
    let blocks = (0..c * c)
        .into_par_iter()
        .map(|cell| {
            let (phi, psi) = (&phis[cell / c], &psis[cell % c]);
            Array2::from_shape_fn((phi.len(), psi.len()), |(m, l)| dot(&phi[m], &psi[l]))
        })
        .collect();
    SimilarityTensor::from_blocks(c, blocks)
}
