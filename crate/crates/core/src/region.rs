//! Region masks on the patch grid and the visual-side embeddings built from
//! them.

use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::embed::{l2_normalize, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::oracle::SubsetId;
use crate::similarity::SimilarityTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("patch grid {height}x{width} is empty")));
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of patches `N`.
    pub fn patches(&self) -> usize {
        self.height * self.width
    }
}

/// The `M` binary masks of one image. Every mask selects at least one patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMaskSet {
    patches: usize,
    masks: Vec<Vec<u8>>,
}

impl RegionMaskSet {
    pub fn new(patches: usize, masks: Vec<Vec<u8>>) -> Result<Self> {
        for (index, mask) in masks.iter().enumerate() {
            if mask.len() != patches {
                return Err(Error::InvalidMask {
                    index,
                    reason: format!("length {} does not match {patches} patches", mask.len()),
                });
            }
            if let Some(bad) = mask.iter().find(|&&b| b > 1) {
                return Err(Error::InvalidMask {
                    index,
                    reason: format!("non-binary value {bad}"),
                });
            }
            if !mask.contains(&1) {
                return Err(Error::InvalidMask {
                    index,
                    reason: "empty mask".into(),
                });
            }
        }
        Ok(Self { patches, masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn mask(&self, m: usize) -> &[u8] {
        &self.masks[m]
    }

    pub fn masks(&self) -> &[Vec<u8>] {
        &self.masks
    }
}

/// Samples `count` axis-aligned rectangles with uniform centre, height and
/// width, clipped to the grid.
///
/// The centre always lies on the grid, so a clipped rectangle is never empty.
pub fn gen_random_masks(grid: PatchGrid, count: usize, seed: u64) -> RegionMaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_masks(grid, count, &mut rng)
}

pub(crate) fn sample_masks<R: Rng>(grid: PatchGrid, count: usize, rng: &mut R) -> RegionMaskSet {
    let masks = (0..count)
        .map(|_| {
            let rows = sample_extent(rng, grid.height);
            let cols = sample_extent(rng, grid.width);
            let mut mask = vec![0u8; grid.patches()];
            for r in rows {
                mask[r * grid.width..(r + 1) * grid.width][cols.clone()].fill(1);
            }
            mask
        })
        .collect();
    RegionMaskSet {
        patches: grid.patches(),
        masks,
    }
}

/// Centre in `[0, extent)`, size in `[1, extent]`, clipped.
fn sample_extent<R: Rng>(rng: &mut R, extent: usize) -> Range<usize> {
    let centre = rng.random_range(0..extent);
    let size = rng.random_range(1..=extent);
    let lo = centre.saturating_sub((size - 1) / 2);
    let hi = (centre + size / 2 + 1).min(extent);
    lo..hi
}

#[derive(Deserialize)]
struct MaskRecord {
    masks: Vec<Vec<u8>>,
}

/// Reads a JSONL mask file, one `{"masks": [[0,1,...], ...]}` record per
/// image. Masks must already be at patch resolution.
pub fn load_masks(path: impl AsRef<Path>, grid: PatchGrid) -> Result<Vec<RegionMaskSet>> {
    let file = std::fs::File::open(path)?;
    let mut sets = Vec::new();
    for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        sets.push(parse_mask_record(&line, grid).map_err(|e| match e {
            Error::Json { reason, .. } => Error::Json {
                line: line_no + 1,
                reason,
            },
            other => other,
        })?);
    }
    Ok(sets)
}

/// Parses a single mask record.
pub fn parse_mask_record(line: &str, grid: PatchGrid) -> Result<RegionMaskSet> {
    let record: MaskRecord = serde_json::from_str(line).map_err(|e| Error::Json {
        line: 1,
        reason: e.to_string(),
    })?;
    RegionMaskSet::new(grid.patches(), record.masks)
}

/// `phi(I | R_m)`: unit-normalised sum of the patch embeddings under a mask.
pub fn region_embed(patches: &EmbeddingMatrix, mask: &[u8]) -> Result<Vec<f64>> {
    l2_normalize(&patches.masked_sum(mask)?)
}

/// `r_A`: sum of the per-mask embeddings over a subset of masks.
///
/// The sum is not renormalised; the empty subset gives the zero vector.
pub fn region_set_embed(patches: &EmbeddingMatrix, maskset: &RegionMaskSet, subset: SubsetId) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; patches.dim()];
    for m in subset.members(maskset.len()) {
        let phi = region_embed(patches, maskset.mask(m))?;
        for (a, v) in acc.iter_mut().zip(&phi) {
            *a += v;
        }
    }
    Ok(acc)
}

/// `Q_{i,j,m,B}` for every mask `m` and node `B` of text `j`: an `M x K`
/// matrix whose column `B` sums the `S0` block over the leaves of `B`.
///
/// This matrix is the whole input of both the exact aggregation and the
/// approximations.
pub fn per_mask_node_scores(s0: &SimilarityTensor, i: usize, j: usize, node_spans: &[Range<usize>]) -> Array2<f64> {
    node_scores_from_block(&s0.block(i, j), node_spans)
}

pub(crate) fn node_scores_from_block(block: &ndarray::ArrayView2<'_, f64>, node_spans: &[Range<usize>]) -> Array2<f64> {
    let (masks, _) = block.dim();
    Array2::from_shape_fn((masks, node_spans.len()), |(m, b)| {
        node_spans[b].clone().fold(0.0, |acc, leaf| acc + block[[m, leaf]])
    })
}
