//! Brute-force leaf-sum evaluation of a single hinge tree or fern.
//!
//! This enumerates all `2^depth` leaves and computes each leaf indicator as
//! the minimum of hinged decision margins along its path, i.e. the defining
//! sum rather than the traversal reduction. It is exponential in depth and
//! exists as an independent reference for tests; training never calls it.

use super::ForestKind;
use crate::real::Real;

fn relu<R: Real>(v: R) -> R {
    if v > R::zero() {
        v
    } else {
        R::zero()
    }
}

/// Output vector of one member evaluated as the full sum over leaves:
/// `sum_leaf w_leaf * min over path of relu(±(x_f - t))`, where the sign
/// follows the branch direction (left children hinge `t - x`, right children
/// hinge `x - t`).
///
/// `leaf_weights` is `[2^depth, outputs]` row-major. At most one leaf term is
/// nonzero; ties at a zero margin kill every term.
pub fn leaf_sum<R: Real>(
    kind: ForestKind,
    x: &[R],
    feature_index: &[usize],
    thresholds: &[R],
    leaf_weights: &[R],
    depth: usize,
    outputs: usize,
) -> Vec<R> {
    let leaves = 1usize << depth;
    let mut result = vec![R::zero(); outputs];
    for leaf in 0..leaves {
        let mut indicator = R::infinity();
        let mut vertex = 0usize;
        for level in 0..depth {
            // Bits of the leaf index, most significant first, give the
            // branch direction at each level.
            let goes_right = (leaf >> (depth - 1 - level)) & 1 == 1;
            let decision = match kind {
                ForestKind::Tree => vertex,
                ForestKind::Fern => level,
            };
            let margin = x[feature_index[decision]] - thresholds[decision];
            let term = if goes_right {
                relu(margin)
            } else {
                relu(-margin)
            };
            if term < indicator {
                indicator = term;
            }
            vertex = 2 * vertex + usize::from(goes_right) + 1;
        }
        for (out, w) in result
            .iter_mut()
            .zip(&leaf_weights[leaf * outputs..(leaf + 1) * outputs])
        {
            *out = *out + *w * indicator;
        }
    }
    result
}

/// Number of leaves whose indicator is strictly positive. The hinge-forest
/// construction guarantees this is zero or one.
pub fn nonzero_leaf_terms<R: Real>(
    kind: ForestKind,
    x: &[R],
    feature_index: &[usize],
    thresholds: &[R],
    depth: usize,
) -> usize {
    let leaves = 1usize << depth;
    let mut count = 0;
    for leaf in 0..leaves {
        let mut indicator = R::infinity();
        let mut vertex = 0usize;
        for level in 0..depth {
            let goes_right = (leaf >> (depth - 1 - level)) & 1 == 1;
            let decision = match kind {
                ForestKind::Tree => vertex,
                ForestKind::Fern => level,
            };
            let margin = x[feature_index[decision]] - thresholds[decision];
            let term = if goes_right {
                relu(margin)
            } else {
                relu(-margin)
            };
            if term < indicator {
                indicator = term;
            }
            vertex = 2 * vertex + usize::from(goes_right) + 1;
        }
        if indicator > R::zero() {
            count += 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_two_leaf_sum_by_hand() {
        // The traversal of x = [0.5, 0.3] over F = [0, 1, 0],
        // t = [0, -1, 1] reaches leaf 2 with margin 0.5. With a weight only
        // on leaf 2, the sum must be w2 * 0.5 and every other leaf's
        // indicator must vanish.
        let x = [0.5, 0.3];
        let feature_index = [0usize, 1, 0];
        let thresholds = [0.0, -1.0, 1.0];
        let w2 = 1.7f64;
        let weights = [0.0, 0.0, w2, 0.0];
        let out = leaf_sum(
            ForestKind::Tree,
            &x,
            &feature_index,
            &thresholds,
            &weights,
            2,
            1,
        );
        assert!((out[0] - w2 * 0.5).abs() < 1e-12);

        // Each other leaf alone contributes exactly zero.
        for leaf in [0usize, 1, 3] {
            let mut w = [0.0; 4];
            w[leaf] = 1.0;
            let out = leaf_sum(ForestKind::Tree, &x, &feature_index, &thresholds, &w, 2, 1);
            assert_eq!(out[0], 0.0);
        }
    }

    #[test]
    fn input_on_a_visited_threshold_kills_the_sum() {
        let x = [1.0, 0.3];
        let feature_index = [0usize, 1, 0];
        // Root threshold equals the input feature exactly.
        let thresholds = [1.0, -1.0, 0.0];
        let weights = [0.3, -0.4, 0.5, -0.6];
        let out = leaf_sum(ForestKind::Tree, &x, &feature_index, &thresholds, &weights, 2, 1);
        assert_eq!(out[0], 0.0);
        assert_eq!(
            nonzero_leaf_terms(ForestKind::Tree, &x, &feature_index, &thresholds, 2),
            0
        );
    }

    #[test]
    fn at_most_one_leaf_term_is_nonzero() {
        use rand::Rng;
        let mut rng = crate::rng::seed_stream(5, "leaf-terms");
        for _ in 0..200 {
            let depth = rng.random_range(1..=5usize);
            let features = rng.random_range(1..=8usize);
            let kind = if rng.random_range(0..2) == 0 {
                ForestKind::Tree
            } else {
                ForestKind::Fern
            };
            let decisions = kind.decisions(depth);
            let feature_index: Vec<usize> =
                (0..decisions).map(|_| rng.random_range(0..features)).collect();
            let thresholds: Vec<f64> =
                (0..decisions).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..features).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(nonzero_leaf_terms(kind, &x, &feature_index, &thresholds, depth) <= 1);
        }
    }
}
