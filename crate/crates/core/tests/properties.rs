use std::f64::consts::LN_2;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use powerset_align::embed::dot;
use powerset_align::harness::{gen_synthetic_batch, random_tree, SyntheticSpec};
use powerset_align::loss::{phi_gamma, triplet_loss};
use powerset_align::nla::{generic_cell, t1_cell, t2_cell, Activation, Layers};
use powerset_align::oracle::{
    exponential_sum_bruteforce, exponential_sum_logcosh, lambda_bound, max_subset_score, r2t_exact, r2t_naive,
    t2r_exact, t2r_naive, SubsetId,
};
use powerset_align::region::{gen_random_masks, per_mask_node_scores, region_set_embed, PatchGrid};
use powerset_align::similarity::{compute_s0, MiniBatch};
use powerset_align::tree::{node_token_masks, parse_bracketed, phrase_node_embed, NodeSetPolicy};

const SLACK: f64 = 1e-12;

fn spec_strategy() -> impl Strategy<Value = SyntheticSpec> {
    (2usize..=4, 1usize..=4, 1usize..=6, 1usize..=8, prop::sample::select(vec![1usize, 4, 16]), any::<u64>())
        .prop_map(|(c, side, masks, tokens, dim, seed)| SyntheticSpec {
            batch_size: c,
            grid: (side, side + 1),
            tokens,
            dim,
            masks,
            depth_range: (1, usize::MAX),
            seed,
        })
}

fn batch_strategy() -> impl Strategy<Value = MiniBatch> {
    spec_strategy().prop_map(|s| gen_synthetic_batch(&s).unwrap())
}

/// Node-score matrices with `M` masks and `K` nodes.
fn scores_strategy(max_masks: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_masks, 1usize..=15).prop_flat_map(|(m, k)| {
        prop::collection::vec(-3.0f64..3.0, m * k).prop_map(move |v| Array2::from_shape_vec((m, k), v).unwrap())
    })
}

/// Entries on a dyadic grid, so sums and differences are exact.
fn dyadic_matrix() -> impl Strategy<Value = Array2<f64>> {
    (2usize..=6).prop_flat_map(|c| {
        prop::collection::vec(-4096i32..=4096, c * c)
            .prop_map(move |v| Array2::from_shape_vec((c, c), v.into_iter().map(|x| x as f64 / 1024.0).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn s0_is_permutation_equivariant(batch in batch_strategy(), rot in 0usize..4) {
        let c = batch.len();
        let order: Vec<usize> = (0..c).map(|k| (k + rot) % c).rev().collect();
        let s0 = compute_s0(&batch).unwrap();
        let moved = compute_s0(&batch.permuted(&order)).unwrap();
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(moved.block(i, j), s0.block(order[i], order[j]));
            }
        }
    }

    #[test]
    fn s0_entries_are_cosines(batch in batch_strategy()) {
        let s0 = compute_s0(&batch).unwrap();
        let limit = 1.0 + 4.0 * f64::EPSILON;
        for i in 0..s0.size() {
            for j in 0..s0.size() {
                prop_assert!(s0.block(i, j).iter().all(|s| s.abs() <= limit));
            }
        }
    }

    #[test]
    fn identical_samples_give_identical_blocks(batch in batch_strategy()) {
        let s0 = compute_s0(&batch.permuted(&vec![0; batch.len()])).unwrap();
        for i in 0..s0.size() {
            for j in 0..s0.size() {
                prop_assert_eq!(s0.block(i, j), s0.block(0, 0));
            }
        }
    }

    #[test]
    fn subset_scores_are_bilinear(batch in batch_strategy(), subset in any::<u64>()) {
        let s0 = compute_s0(&batch).unwrap();
        let policy = NodeSetPolicy::all_nodes();
        let (image, text) = (batch.image(0), batch.text(1));
        let subset = SubsetId(subset & ((1u64 << image.masks.len()) - 1));
        let r_a = region_set_embed(&image.patches, &image.masks, subset).unwrap();
        let leaf_masks = node_token_masks(&text.tree, text.tokens.rows(), &text.token_map).unwrap().leaf_masks;
        let scores = per_mask_node_scores(&s0, 0, 1, &text.tree.node_spans(&policy));
        for (b, &node) in text.tree.enumerate_nodes(&policy).iter().enumerate() {
            let p_b = phrase_node_embed(&text.tokens, &text.tree.nodes()[node], &leaf_masks).unwrap();
            let direct = dot(&r_a, &p_b);
            let summed: f64 = subset.members(image.masks.len()).map(|m| scores[[m, b]]).sum();
            prop_assert!((direct - summed).abs() <= 1e-10, "{} vs {}", direct, summed);
        }
    }

    #[test]
    fn masks_are_deterministic_and_non_empty(h in 1usize..=9, w in 1usize..=9, count in 1usize..=12, seed in any::<u64>()) {
        let grid = PatchGrid::new(h, w).unwrap();
        let a = gen_random_masks(grid, count, seed);
        prop_assert_eq!(&a, &gen_random_masks(grid, count, seed));
        prop_assert_eq!(a.len(), count);
        for mask in a.masks() {
            prop_assert_eq!(mask.len(), h * w);
            prop_assert!(mask.contains(&1));
        }
    }

    #[test]
    fn trees_round_trip_and_partition(leaves in 1usize..=16, seed in any::<u64>()) {
        let tree = random_tree(&mut ChaCha8Rng::seed_from_u64(seed), leaves, (1, usize::MAX)).unwrap();
        let text = tree.render();
        let again = parse_bracketed(&text).unwrap();
        prop_assert_eq!(&again, &tree);
        prop_assert_eq!(again.render(), text);

        for node in tree.nodes().iter().filter(|n| !n.is_leaf()) {
            let mut cursor = node.leaf_span.start;
            for &child in &node.children {
                let span = &tree.nodes()[child].leaf_span;
                prop_assert_eq!(span.start, cursor);
                cursor = span.end;
            }
            prop_assert_eq!(cursor, node.leaf_span.end);
        }
        let policy = NodeSetPolicy::all_nodes();
        prop_assert_eq!(tree.enumerate_nodes(&policy).len(), tree.internal_count() + tree.leaf_count());
        prop_assert_eq!(tree.enumerate_nodes(&policy), again.enumerate_nodes(&policy));
    }

    #[test]
    fn powerset_sum_identity(q in prop::collection::vec(-2.0f64..2.0, 1..=12), tau in prop::sample::select(vec![1.0, 0.1, 0.01])) {
        let brute = exponential_sum_bruteforce(&q, tau).unwrap();
        let closed = exponential_sum_logcosh(&q, tau);
        prop_assert!((brute - closed).abs() <= 1e-8 * brute.abs().max(1.0), "{} vs {}", brute, closed);
    }

    #[test]
    fn lse_gap_is_bounded(q in prop::collection::vec(-2.0f64..2.0, 1..=12), tau in prop::sample::select(vec![1.0, 0.1, 0.01, 0.001])) {
        let gap = tau * exponential_sum_bruteforce(&q, tau).unwrap() - max_subset_score(&q).unwrap();
        let bound = tau * q.len() as f64 * LN_2;
        prop_assert!(gap >= -SLACK && gap <= bound + SLACK * (1.0 + bound), "gap {}", gap);
    }

    #[test]
    fn positive_mask_never_lowers_t2r(scores in scores_strategy(8), extra in prop::collection::vec(0.0f64..2.0, 15)) {
        let k = scores.ncols();
        let mut grown = scores.clone();
        grown.push_row(ndarray::ArrayView1::from(&extra[..k])).unwrap();
        prop_assert!(t2r_exact(&grown.view()).unwrap() >= t2r_exact(&scores.view()).unwrap() - SLACK);
    }

    #[test]
    fn gray_code_matches_naive(scores in scores_strategy(10)) {
        let v = scores.view();
        prop_assert!((r2t_exact(&v).unwrap() - r2t_naive(&v)).abs() <= 1e-12);
        prop_assert!((t2r_exact(&v).unwrap() - t2r_naive(&v)).abs() <= 1e-12);
    }

    #[test]
    fn t1_relu_is_exact_and_softplus_bounded(scores in scores_strategy(10)) {
        let v = scores.view();
        let t2r = t2r_exact(&v).unwrap();
        prop_assert!((t1_cell(&v, Activation::Relu, 1.0) - t2r).abs() <= 1e-9);
        let mut previous = f64::NEG_INFINITY;
        for tau in [0.001, 0.01, 0.1, 1.0] {
            let t1 = t1_cell(&v, Activation::Softplus, tau);
            let bound = tau * scores.nrows() as f64 * LN_2;
            prop_assert!(t1 - t2r >= -SLACK && t1 - t2r <= bound + SLACK * (1.0 + bound));
            prop_assert!(t1 >= previous - SLACK);
            previous = t1;
        }
    }

    #[test]
    fn t2_bracketing_and_smooth_bound(scores in scores_strategy(10), alpha in 0.0f64..=1.0, tau in prop::sample::select(vec![1.0, 0.1, 0.01, 1e-4])) {
        let v = scores.view();
        let (m, k) = (scores.nrows() as f64, scores.ncols() as f64);
        let r2t = r2t_exact(&v).unwrap();
        let (lo, hi) = (lambda_bound(&v, 0.0).unwrap(), lambda_bound(&v, 1.0).unwrap());
        prop_assert!(lo <= r2t + SLACK * (1.0 + r2t.abs()) && r2t <= hi + SLACK * (1.0 + hi.abs()));

        let lam = lambda_bound(&v, alpha).unwrap();
        let smooth = t2_cell(&v, Activation::Tanh, tau, alpha).unwrap() + tau * (alpha * m * LN_2 + (1.0 - alpha) * k.ln());
        let upper = lam + tau * (alpha * m * LN_2 + k.ln());
        let slack = 1e-11 * (1.0 + lam.abs());
        prop_assert!(smooth >= lam - slack && smooth <= upper + slack, "{} <= {} <= {}", lam, smooth, upper);
    }

    #[test]
    fn generic_layers_match_fused(scores in scores_strategy(6), alpha in 0.0f64..=1.0, tau in prop::sample::select(vec![1.0, 0.5, 0.1])) {
        let v = scores.view();
        for act in Activation::T2 {
            let fused = t2_cell(&v, act, tau, alpha).unwrap();
            let generic = generic_cell(&v, &Layers::t2(act, tau, alpha).unwrap()).unwrap();
            prop_assert!((fused - generic).abs() <= 1e-8 * fused.abs().max(1.0), "{:?}: {} vs {}", act, fused, generic);
        }
    }

    #[test]
    fn phi_properties(x in dyadic_matrix(), shift in -4096i32..=4096) {
        let shifted = &x + shift as f64 / 1024.0;
        let mut previous = 0.0;
        for gamma in [0.0, 0.1, 0.2, 0.5, 1.0] {
            let phi = phi_gamma(&x.view(), gamma).unwrap();
            prop_assert!(phi >= 0.0);
            prop_assert!(phi >= previous);
            prop_assert_eq!(phi, phi_gamma(&shifted.view(), gamma).unwrap());
            previous = phi;
        }
    }

    #[test]
    fn dominant_diagonal_has_zero_phi0(x in dyadic_matrix()) {
        let mut d = x.clone();
        let c = d.nrows();
        for i in 0..c {
            let row_max = x.index_axis(Axis(0), i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            d[[i, i]] = row_max + 1.0;
        }
        prop_assert_eq!(phi_gamma(&d.view(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn triplet_loss_is_permutation_invariant(x in dyadic_matrix(), rot in 0usize..6, gamma in prop::sample::select(vec![0.0, 0.2, 1.0])) {
        let c = x.nrows();
        let order: Vec<usize> = (0..c).map(|k| (k + rot) % c).rev().collect();
        let moved = Array2::from_shape_fn((c, c), |(i, j)| x[[order[i], order[j]]]);
        let a = triplet_loss(&x.view(), gamma).unwrap();
        let b = triplet_loss(&moved.view(), gamma).unwrap();
        // The per-row hinges are the same values summed in another order.
        prop_assert!((a - b).abs() <= 1e-15 * (1.0 + a));
    }
}
