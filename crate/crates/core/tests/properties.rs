//! Property tests for the spec's numeric invariants.

use proptest::prelude::*;
use sta_core::diffusion::{build_schedule, forward_marginal, ScheduleSpec};
use sta_core::encoder::contrastive_loss;
use sta_core::graph::Graph;
use sta_core::metrics::{recall_at_k, RetrievalIndex};
use sta_core::vq::TokenGrid;

proptest! {
    // softmax rows sum to 1 within 1e-12 for inputs with magnitude <= 1e3
    #[test]
    fn softmax_rows_sum_to_one(
        values in proptest::collection::vec(-1e3f64..1e3, 12),
        axis in 0usize..2,
    ) {
        let mut g = Graph::new();
        let x = g.leaf_from(vec![3, 4], values).unwrap();
        let y = g.softmax(x, axis).unwrap();
        let v = g.values(y);
        let (lanes, len, stride, lane_stride) = if axis == 1 {
            (3, 4, 1, 4)
        } else {
            (4, 3, 4, 1)
        };
        for lane in 0..lanes {
            let mut sum = 0.0;
            for i in 0..len {
                sum += v[lane * lane_stride + i * stride];
            }
            prop_assert!((sum - 1.0).abs() < 1e-12, "lane {} sums to {}", lane, sum);
        }
    }

    // schedule constraint holds exactly and cumulative rows are proper
    // distributions for any valid per-step spec
    #[test]
    fn schedule_invariants_hold_for_random_specs(
        seed_pairs in proptest::collection::vec((0.05f64..0.9, 0.0f64..0.9), 1..8),
        m in 2usize..6,
    ) {
        let t_steps = seed_pairs.len();
        let alpha: Vec<f64> = seed_pairs.iter().map(|(a, _)| *a).collect();
        let gamma: Vec<f64> = seed_pairs
            .iter()
            .map(|(a, g)| g * (1.0 - a))
            .collect();
        let s = build_schedule(t_steps, m, &ScheduleSpec::PerStep { alpha, gamma }).unwrap();
        for t in 0..t_steps {
            prop_assert_eq!(s.alpha[t] + m as f64 * s.beta[t] + s.gamma[t], 1.0);
        }
        let k0 = TokenGrid { tokens: vec![0, m - 1] };
        for t in 1..=t_steps {
            let field = forward_marginal(&k0, t, &s).unwrap();
            field.validate().unwrap();
        }
    }

    // contrastive loss is nonnegative and invariant under applying the
    // same permutation to both batches
    #[test]
    fn contrastive_loss_nonnegative_and_permutation_invariant(
        raw in proptest::collection::vec(-1.0f64..1.0, 4 * 6 * 2),
        swap in (0usize..4, 0usize..4),
    ) {
        let normalize = |v: &[f64]| -> Vec<f64> {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            v.iter().map(|x| x / n).collect()
        };
        let x: Vec<Vec<f64>> = (0..4).map(|i| normalize(&raw[i * 6..(i + 1) * 6])).collect();
        let y: Vec<Vec<f64>> = (4..8).map(|i| normalize(&raw[i * 6..(i + 1) * 6])).collect();
        let base = contrastive_loss(&x, &y, 0.5).unwrap();
        prop_assert!(base >= 0.0);
        let mut perm: Vec<usize> = (0..4).collect();
        perm.swap(swap.0, swap.1);
        let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let yp: Vec<Vec<f64>> = perm.iter().map(|&i| y[i].clone()).collect();
        let permuted = contrastive_loss(&xp, &yp, 0.5).unwrap();
        prop_assert!((base - permuted).abs() < 1e-10);
    }

    // recall is nondecreasing in k for arbitrary geometry
    #[test]
    fn recall_nondecreasing_in_k(
        raw in proptest::collection::vec(-1.0f64..1.0, 10 * 3 * 2),
    ) {
        let d = 3;
        let n = 10;
        let candidates = raw[..n * d].to_vec();
        let queries = raw[n * d..].to_vec();
        let index = RetrievalIndex {
            d,
            candidates,
            ground_truth: (0..n).map(|i| vec![i]).collect(),
        };
        let mut prev = 0.0;
        for k in 1..=n {
            let r = recall_at_k(&index, &queries, k).unwrap();
            prop_assert!(r >= prev - 1e-12);
            prev = r;
        }
    }

    // quantize is idempotent for any codebook/latents
    #[test]
    fn quantize_idempotent(
        entries in proptest::collection::vec(-2.0f64..2.0, 6 * 3),
        latents in proptest::collection::vec(-2.0f64..2.0, 4 * 3),
    ) {
        use sta_core::tensor::Tensor;
        use sta_core::vq::{quantize, Codebook};
        let codebook = Codebook {
            entries: Tensor::from_vec(vec![6, 3], entries).unwrap(),
        };
        let z = Tensor::from_vec(vec![4, 3], latents).unwrap();
        let (g1, q1) = quantize(&z, &codebook).unwrap();
        let (g2, q2) = quantize(&q1, &codebook).unwrap();
        prop_assert_eq!(g1.tokens, g2.tokens);
        prop_assert_eq!(q1.values, q2.values);
    }
}
