//! JSONL batch files.
//!
//! One record per image/text pair:
//!
//! ```json
//! {"patches": [[...D], ...N], "tokens": [[...D], ...L],
//!  "image_global": [...D], "text_global": [...D],
//!  "masks": [[0,1,...N], ...M], "tree": "(S (NP a dog) (VP sits))",
//!  "token_spans": [[0,1],[1,3],[3,4]]}
//! ```
//!
//! `token_spans` is optional and gives each leaf a half-open token range;
//! without it leaf `k` is token `k`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::region::RegionMaskSet;
use crate::similarity::{ImageSample, MiniBatch, TextSample};
use crate::tree::{parse_bracketed, TokenMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub patches: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<f64>>,
    pub image_global: Vec<f64>,
    pub text_global: Vec<f64>,
    pub masks: Vec<Vec<u8>>,
    pub tree: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_spans: Option<Vec<[usize; 2]>>,
}

impl PairRecord {
    pub fn into_pair(self) -> Result<(ImageSample, TextSample)> {
        let patches = EmbeddingMatrix::from_rows(&self.patches)?;
        let masks = RegionMaskSet::new(patches.rows(), self.masks)?;
        let tokens = EmbeddingMatrix::from_rows(&self.tokens)?;
        let tree = parse_bracketed(&self.tree)?;
        let token_map = match self.token_spans {
            Some(spans) => TokenMap::new(spans.iter().map(|[a, b]| *a..*b).collect(), tokens.rows())?,
            None => TokenMap::identity(tree.leaf_count()),
        };
        Ok((
            ImageSample {
                patches,
                masks,
                global: self.image_global,
            },
            TextSample {
                tokens,
                tree,
                token_map,
                global: self.text_global,
            },
        ))
    }

    pub fn from_pair(image: &ImageSample, text: &TextSample) -> Self {
        let identity = TokenMap::identity(text.tree.leaf_count());
        let token_spans = (text.token_map != identity || text.tokens.rows() != text.tree.leaf_count())
            .then(|| text.token_map.ranges().iter().map(|r| [r.start, r.end]).collect());
        Self {
            patches: image.patches.to_rows(),
            tokens: text.tokens.to_rows(),
            image_global: image.global.clone(),
            text_global: text.global.clone(),
            masks: image.masks.masks().to_vec(),
            tree: text.tree.render(),
            token_spans,
        }
    }
}

/// Parses a batch from JSONL text. Blank lines are skipped.
pub fn parse_batch(text: &str) -> Result<MiniBatch> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(line).map_err(|e| Error::Json {
            line: n + 1,
            reason: e.to_string(),
        })?;
        pairs.push(record.into_pair()?);
    }
    MiniBatch::new(pairs)
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<MiniBatch> {
    let file = std::fs::File::open(path)?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_batch(&text)
}

pub fn write_batch<W: Write>(batch: &MiniBatch, mut out: W) -> Result<()> {
    for (image, text) in batch.pairs() {
        let line = serde_json::to_string(&PairRecord::from_pair(image, text)).map_err(|e| Error::Json {
            line: 0,
            reason: e.to_string(),
        })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}
