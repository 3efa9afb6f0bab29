//! Region-to-phrase alignment over the powerset of region masks.
//!
//! An image carries `M` region masks and a caption carries a parse tree.
//! Matching every subset of masks against every tree node gives two exact
//! similarities, region-to-text ([`oracle::r2t_exact`]) and text-to-region
//! ([`oracle::t2r_exact`]), whose cost grows as `2^M`. The [`nla`] module
//! replaces them with linear-time non-linear aggregators carrying explicit
//! error bounds, and [`loss`] turns either into a triplet margin objective.
//!
//! ```
//! use powerset_align::harness::{gen_synthetic_batch, SyntheticSpec};
//! use powerset_align::nla::{s_bar, NlaConfig};
//! use powerset_align::oracle::aggregate_exact;
//! use powerset_align::similarity::compute_s0;
//! use powerset_align::tree::NodeSetPolicy;
//!
//! let batch = gen_synthetic_batch(&SyntheticSpec::default()).unwrap();
//! let s0 = compute_s0(&batch).unwrap();
//! let spans = batch.node_spans(&NodeSetPolicy::all_nodes());
//! let exact = aggregate_exact(&s0, &spans).unwrap();
//! let approx = s_bar(&s0, &spans, &NlaConfig::default_t1(), &NlaConfig::default_t2()).unwrap();
//! assert_eq!(exact.q_bar.dim(), approx.dim());
//! ```

pub mod embed;
pub mod error;
pub mod harness;
pub mod io;
pub mod loss;
pub mod nla;
pub mod oracle;
pub mod region;
pub mod similarity;
pub mod special;
pub mod tree;

pub use error::{Error, Result};

// The book's chapters are compiled as doctests so their snippets stay in
// step with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/similarities.md")]
    mod similarities {}
    #[doc = include_str!("../../../book/src/exact.md")]
    mod exact {}
    #[doc = include_str!("../../../book/src/aggregators.md")]
    mod aggregators {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
