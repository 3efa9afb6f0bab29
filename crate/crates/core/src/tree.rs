//! Constituency trees in bracketed form, token masks, and phrase embeddings.
//!
//! The accepted grammar is
//!
//! ```text
//! tree := '(' LABEL (tree | WORD)+ ')'
//! ```
//!
//! where `LABEL` and `WORD` are runs of non-parenthesis, non-whitespace
//! characters. Terminals become leaf nodes, numbered left to right.
//!
//! ```
//! use powerset_align::tree::{parse_bracketed, NodeSetPolicy};
//!
//! let tree = parse_bracketed("(S (NP a dog) (VP sits))").unwrap();
//! assert_eq!(tree.leaf_count(), 3);
//! assert_eq!(tree.node_spans(&NodeSetPolicy::all_nodes()).len(), 6);
//! assert_eq!(tree.render(), "(S (NP a dog) (VP sits))");
//! ```

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{l2_normalize, EmbeddingMatrix};
use crate::error::{Error, Result};

/// One constituent or terminal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    /// Constituent tag for internal nodes, the word itself for leaves.
    pub label: String,
    pub children: Vec<usize>,
    /// Leaves covered by this node; always contiguous.
    pub leaf_span: Range<usize>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A parsed constituency tree. Nodes are stored in pre-order, root first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    nodes: Vec<Node>,
    leaf_count: usize,
}

impl ParseTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    /// Terminal words in order.
    pub fn words(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| n.label.as_str())
            .collect()
    }

    /// Depth of the deepest leaf, counting the root as depth 0.
    pub fn depth(&self) -> usize {
        fn go(t: &ParseTree, id: usize) -> usize {
            t.nodes[id].children.iter().map(|&c| 1 + go(t, c)).max().unwrap_or(0)
        }
        go(self, 0)
    }

    /// Renders back to the bracketed form with single-space separators.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_node(0, &mut out);
        out
    }

    fn render_node(&self, id: usize, out: &mut String) {
        let node = &self.nodes[id];
        if node.is_leaf() {
            out.push_str(&node.label);
            return;
        }
        out.push('(');
        out.push_str(&node.label);
        for &c in &node.children {
            out.push(' ');
            self.render_node(c, out);
        }
        out.push(')');
    }

    /// The node list used as the tree side of the aggregation, in pre-order.
    pub fn enumerate_nodes(&self, policy: &NodeSetPolicy) -> Vec<usize> {
        let mut seen = HashSet::new();
        (0..self.nodes.len())
            .filter(|&id| {
                let node = &self.nodes[id];
                let keep = match policy.mode {
                    NodeSetMode::AllNodes => true,
                    NodeSetMode::InternalOnly => !node.is_leaf(),
                };
                keep && (!policy.dedupe_spans || seen.insert((node.leaf_span.start, node.leaf_span.end)))
            })
            .collect()
    }

    /// Leaf spans of [`enumerate_nodes`](Self::enumerate_nodes), the only
    /// structural information the aggregators need.
    pub fn node_spans(&self, policy: &NodeSetPolicy) -> Vec<Range<usize>> {
        self.enumerate_nodes(policy)
            .into_iter()
            .map(|id| self.nodes[id].leaf_span.clone())
            .collect()
    }

    /// Builds a tree from already-linked nodes, checking every structural
    /// invariant. Used by generators that do not go through text.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        let invalid = |reason: String| Error::Parse { offset: 0, reason };
        if nodes.is_empty() {
            return Err(invalid("tree has no nodes".into()));
        }
        let leaf_count = nodes.iter().filter(|n| n.is_leaf()).count();
        if nodes[0].leaf_span != (0..leaf_count) {
            return Err(invalid("root does not cover every leaf".into()));
        }
        let mut next_leaf = 0;
        let mut parents = vec![0usize; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf() {
                if node.leaf_span != (next_leaf..next_leaf + 1) {
                    return Err(invalid(format!("leaf {id} has span {:?}", node.leaf_span)));
                }
                next_leaf += 1;
                continue;
            }
            let mut cursor = node.leaf_span.start;
            for &c in &node.children {
                if c <= id || c >= nodes.len() {
                    return Err(invalid(format!("node {id} has child {c} out of pre-order")));
                }
                parents[c] += 1;
                let span = &nodes[c].leaf_span;
                if span.start != cursor || span.is_empty() {
                    return Err(invalid(format!("children of node {id} do not partition its span")));
                }
                cursor = span.end;
            }
            if cursor != node.leaf_span.end {
                return Err(invalid(format!("children of node {id} do not partition its span")));
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(invalid("nodes do not form a single rooted tree".into()));
        }
        Ok(Self { nodes, leaf_count })
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for ParseTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_bracketed(s)
    }
}

/// Which nodes take part in the tree-side sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeSetMode {
    AllNodes,
    InternalOnly,
}

impl FromStr for NodeSetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-nodes" | "all" => Ok(Self::AllNodes),
            "internal-only" | "internal" => Ok(Self::InternalOnly),
            other => Err(Error::Config(format!("unknown node-set policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSetPolicy {
    pub mode: NodeSetMode,
    /// Keep only the outermost node of each distinct leaf span.
    pub dedupe_spans: bool,
}

impl NodeSetPolicy {
    pub fn all_nodes() -> Self {
        Self {
            mode: NodeSetMode::AllNodes,
            dedupe_spans: false,
        }
    }

    pub fn internal_only() -> Self {
        Self {
            mode: NodeSetMode::InternalOnly,
            dedupe_spans: false,
        }
    }
}

impl Default for NodeSetPolicy {
    fn default() -> Self {
        Self::all_nodes()
    }
}

/// Parses a bracketed constituency tree.
///
/// Errors carry the byte offset at which the input stopped making sense.
pub fn parse_bracketed(text: &str) -> Result<ParseTree> {
    let mut parser = Parser {
        src: text.as_bytes(),
        pos: 0,
        nodes: Vec::new(),
        leaves: 0,
    };
    parser.skip_ws();
    if parser.pos == parser.src.len() {
        return Err(parser.err("empty input, no tree"));
    }
    parser.tree()?;
    parser.skip_ws();
    if parser.pos != parser.src.len() {
        return Err(parser.err("trailing input after the root constituent"));
    }
    let leaf_count = parser.leaves;
    Ok(ParseTree {
        nodes: parser.nodes,
        leaf_count,
    })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    nodes: Vec<Node>,
    leaves: usize,
}

impl Parser<'_> {
    fn err(&self, reason: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            reason: reason.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn atom(&mut self) -> Option<String> {
        let start = self.pos;
        while self.pos < self.src.len() {
            let b = self.src[self.pos];
            if b == b'(' || b == b')' || b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        // Atoms end at ASCII delimiters, so the slice is valid UTF-8.
        (self.pos > start).then(|| String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn tree(&mut self) -> Result<usize> {
        if self.src.get(self.pos) != Some(&b'(') {
            return Err(self.err("expected '('"));
        }
        self.pos += 1;
        self.skip_ws();
        let label = self.atom().ok_or_else(|| self.err("constituent has no label"))?;
        let id = self.nodes.len();
        let first_leaf = self.leaves;
        self.nodes.push(Node {
            label,
            children: Vec::new(),
            leaf_span: first_leaf..first_leaf,
        });
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.src.get(self.pos) {
                None => return Err(self.err("unbalanced parentheses: input ended inside a constituent")),
                Some(b')') => {
                    if children.is_empty() {
                        return Err(self.err("empty constituent"));
                    }
                    self.pos += 1;
                    break;
                }
                Some(b'(') => children.push(self.tree()?),
                Some(_) => {
                    let word = self.atom().expect("non-delimiter byte starts an atom");
                    let leaf = self.leaves;
                    self.leaves += 1;
                    children.push(self.nodes.len());
                    self.nodes.push(Node {
                        label: word,
                        children: Vec::new(),
                        leaf_span: leaf..leaf + 1,
                    });
                }
            }
        }
        let node = &mut self.nodes[id];
        node.children = children;
        node.leaf_span = first_leaf..self.leaves;
        Ok(id)
    }
}

/// Binary indicator over the `L` tokens of a description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    bits: Vec<u8>,
}

impl TokenMask {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::TokenMap("token mask values must be 0 or 1".into()));
        }
        if !bits.contains(&1) {
            return Err(Error::TokenMap("token mask selects no tokens".into()));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }
}

/// Assignment of each leaf to a half-open token range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    ranges: Vec<Range<usize>>,
}

impl TokenMap {
    /// Leaf `k` maps to token `k`.
    pub fn identity(leaves: usize) -> Self {
        Self {
            ranges: (0..leaves).map(|k| k..k + 1).collect(),
        }
    }

    /// Validates that ranges are nonempty, inside `[0, tokens)`, and
    /// pairwise disjoint.
    pub fn new(ranges: Vec<Range<usize>>, tokens: usize) -> Result<Self> {
        let mut used = vec![false; tokens];
        for (leaf, r) in ranges.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::TokenMap(format!("leaf {leaf} has an empty token range")));
            }
            if r.end > tokens {
                return Err(Error::TokenMap(format!(
                    "leaf {leaf} range {r:?} exceeds {tokens} tokens"
                )));
            }
            for t in r.clone() {
                if std::mem::replace(&mut used[t], true) {
                    return Err(Error::TokenMap(format!("token {t} is assigned to more than one leaf")));
                }
            }
        }
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Per-leaf token masks plus, for each tree node, the leaves it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeTokenMasks {
    pub leaf_masks: Vec<TokenMask>,
    pub node_leaves: Vec<Vec<usize>>,
}

/// Expands a token map into one mask per leaf and the leaf set of every node.
pub fn node_token_masks(tree: &ParseTree, tokens: usize, map: &TokenMap) -> Result<NodeTokenMasks> {
    let map = TokenMap::new(map.ranges.clone(), tokens)?;
    if map.len() != tree.leaf_count() {
        return Err(Error::TokenMap(format!(
            "{} token ranges for {} leaves",
            map.len(),
            tree.leaf_count()
        )));
    }
    let leaf_masks = map
        .ranges
        .iter()
        .map(|r| {
            let mut bits = vec![0u8; tokens];
            bits[r.clone()].fill(1);
            TokenMask::new(bits)
        })
        .collect::<Result<Vec<_>>>()?;
    let node_leaves = tree.nodes().iter().map(|n| n.leaf_span.clone().collect()).collect();
    Ok(NodeTokenMasks {
        leaf_masks,
        node_leaves,
    })
}

/// Unit-normalised sum of the token embeddings selected by one leaf mask.
pub fn phrase_embed(tokens: &EmbeddingMatrix, mask: &TokenMask) -> Result<Vec<f64>> {
    l2_normalize(&tokens.masked_sum(mask.bits())?)
}

/// Sum of the leaf embeddings under `node`. Deliberately not renormalised.
pub fn phrase_node_embed(tokens: &EmbeddingMatrix, node: &Node, leaf_masks: &[TokenMask]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; tokens.dim()];
    for leaf in node.leaf_span.clone() {
        let psi = phrase_embed(tokens, &leaf_masks[leaf])?;
        for (a, v) in acc.iter_mut().zip(&psi) {
            *a += v;
        }
    }
    Ok(acc)
}
