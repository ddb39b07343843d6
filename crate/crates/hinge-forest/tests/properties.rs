//! Property tests for the library's core invariants.

use proptest::prelude::*;

use hinge_forest::data::{DatasetSplit, Labels, MinibatchIter, SplitTag};
use hinge_forest::forest::{
    fern_traverse, initialize_forest, reference, tree_traverse, ForestKind,
};
use hinge_forest::tensor::Tensor;

proptest! {
    /// The logarithmic traversal agrees with the exponential leaf-sum on
    /// arbitrary members and inputs, and at most one leaf term is nonzero.
    #[test]
    fn traversal_equals_leaf_sum(
        seed in 0u64..5000,
        depth in 1usize..=6,
        features in 1usize..=20,
        outputs in 1usize..=3,
        fern in proptest::bool::ANY,
        xs in proptest::collection::vec(-4.0f64..4.0, 20),
    ) {
        let kind = if fern { ForestKind::Fern } else { ForestKind::Tree };
        let params = initialize_forest::<f64>(1, depth, features, outputs, kind, seed).unwrap();
        let (fi, th, lw) = params.member(0);
        let x = &xs[..features];

        let mut decisions = 0u64;
        let t = match kind {
            ForestKind::Tree => tree_traverse(x, fi, th, depth, &mut decisions),
            ForestKind::Fern => fern_traverse(x, fi, th, depth, &mut decisions),
        };
        prop_assert_eq!(decisions, depth as u64);

        let expected = reference::leaf_sum(kind, x, fi, th, lw, depth, outputs);
        let leaves = 1usize << depth;
        for (k, e) in expected.iter().enumerate() {
            let got = lw[t.leaf * outputs + k] * t.margin.abs();
            let _ = leaves;
            prop_assert!((got - e).abs() < 1e-9, "output {k}: {got} vs {e}");
        }
        prop_assert!(reference::nonzero_leaf_terms(kind, x, fi, th, depth) <= 1);
    }

    /// Margin semantics: the output magnitude is |min margin| * |leaf
    /// weight| componentwise.
    #[test]
    fn output_magnitude_is_margin_times_weight(
        seed in 0u64..5000,
        depth in 1usize..=5,
        features in 1usize..=10,
        xs in proptest::collection::vec(-4.0f64..4.0, 10),
    ) {
        let params =
            initialize_forest::<f64>(1, depth, features, 2, ForestKind::Tree, seed).unwrap();
        let (fi, th, lw) = params.member(0);
        let x = &xs[..features];
        let mut decisions = 0u64;
        let t = tree_traverse(x, fi, th, depth, &mut decisions);
        let out = reference::leaf_sum(ForestKind::Tree, x, fi, th, lw, depth, 2);
        for (k, o) in out.iter().enumerate() {
            let w = lw[t.leaf * 2 + k];
            prop_assert!((o.abs() - t.margin.abs() * w.abs()).abs() < 1e-9);
        }
    }

    /// One epoch of mini-batches visits every row exactly once, whatever
    /// the batch size.
    #[test]
    fn minibatch_epoch_is_a_partition(
        rows in 1usize..=40,
        batch in 1usize..=50,
        seed in 0u64..1000,
    ) {
        let split = DatasetSplit::<f64> {
            features: Tensor::from_vec(&[rows, 1], (0..rows).map(|i| i as f64).collect())
                .unwrap(),
            labels: Labels::Classes(vec![0; rows]),
            tag: SplitTag::Train,
            class_names: vec!["c".into()],
        };
        let mut iter = MinibatchIter::new(&split, batch, seed).unwrap();
        let mut seen: Vec<f64> = Vec::new();
        for _ in 0..iter.batches_per_epoch() {
            seen.extend_from_slice(iter.next().unwrap().0.data());
        }
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<f64> = (0..rows).map(|i| i as f64).collect();
        prop_assert_eq!(seen, expected);
    }

    /// Splits from the same seed are disjoint, cover the permuted prefix,
    /// and reproduce bitwise.
    #[test]
    fn shuffle_split_partitions(
        rows in 4usize..=60,
        seed in 0u64..1000,
    ) {
        use hinge_forest::data::shuffle_split;
        let split = DatasetSplit::<f64> {
            features: Tensor::from_vec(&[rows, 1], (0..rows).map(|i| i as f64).collect())
                .unwrap(),
            labels: Labels::Classes(vec![0; rows]),
            tag: SplitTag::Train,
            class_names: vec!["c".into()],
        };
        let parts = shuffle_split(&split, &[0.5, 0.25], seed).unwrap();
        let again = shuffle_split(&split, &[0.5, 0.25], seed).unwrap();
        let mut seen: Vec<f64> = Vec::new();
        for (a, b) in parts.iter().zip(&again) {
            prop_assert_eq!(a.features.data(), b.features.data());
            seen.extend_from_slice(a.features.data());
        }
        let total = rows / 2 + rows / 4;
        prop_assert_eq!(seen.len(), total);
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        prop_assert_eq!(seen.len(), total);
    }
}
