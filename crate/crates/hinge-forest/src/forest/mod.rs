//! Hinge trees and ferns: randomized initialization, margin-tracking
//! traversal, the forward reduction `h(x) = w_leaf * |margin|`, and the
//! sparse backward that touches one threshold and one leaf row per example
//! per tree.
//!
//! A hinge tree replaces the crisp decision `x > t` with the hinge
//! `relu(x - t)`, and the conjunction along a root-to-leaf path with a
//! minimum. The resulting leaf indicator is zero everywhere except on the
//! path actually taken, where it equals the smallest decision margin, so the
//! whole tree evaluates with the usual logarithmic traversal while staying
//! differentiable almost everywhere.

mod op;
pub mod reference;

pub use op::HingeForest;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::seed_stream;
use crate::tensor::Tensor;

/// Decision structure of an ensemble member.
///
/// A depth-`D` tree holds `2^D - 1` independent decisions; a fern shares one
/// decision per level, so it holds `D`. Both have `2^D` leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForestKind {
    Tree,
    Fern,
}

impl ForestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ForestKind::Tree => "tree",
            ForestKind::Fern => "fern",
        }
    }

    pub fn decisions(self, depth: usize) -> usize {
        match self {
            ForestKind::Tree => (1 << depth) - 1,
            ForestKind::Fern => depth,
        }
    }
}

/// Parameters of a whole forest.
///
/// `feature_index[m * decisions + v]` is the input feature read by decision
/// vertex `v` of member `m`; `thresholds` has the same layout. Leaf weights
/// are `[trees, 2^depth, outputs]`. Feature indices are fixed at
/// initialization and never optimized.
#[derive(Clone, Debug)]
pub struct ForestParams<R: Real> {
    pub kind: ForestKind,
    pub trees: usize,
    pub depth: usize,
    pub in_features: usize,
    pub outputs: usize,
    pub feature_index: Vec<usize>,
    pub thresholds: Tensor<R>,
    pub leaf_weights: Tensor<R>,
}

impl<R: Real> ForestParams<R> {
    pub fn decisions_per_tree(&self) -> usize {
        self.kind.decisions(self.depth)
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    /// Per-member views: `(feature indices, thresholds, leaf weights)`.
    pub fn member(&self, m: usize) -> (&[usize], &[R], &[R]) {
        let d = self.decisions_per_tree();
        let l = self.leaves() * self.outputs;
        (
            &self.feature_index[m * d..(m + 1) * d],
            &self.thresholds.data()[m * d..(m + 1) * d],
            &self.leaf_weights.data()[m * l..(m + 1) * l],
        )
    }
}

/// Randomized initialization: feature indices uniform over the input
/// features (with replacement), thresholds uniform on (-3, 3) (in standard
/// deviations of the normalized inputs), and every leaf-weight
/// scalar drawn from N(0, sigma = 0.01).
pub fn initialize_forest<R: Real>(
    trees: usize,
    depth: usize,
    in_features: usize,
    outputs: usize,
    kind: ForestKind,
    rng_seed: u64,
) -> Result<ForestParams<R>> {
    if in_features == 0 {
        return Err(Error::Config("forest needs at least one input feature".into()));
    }
    if trees == 0 || depth == 0 || outputs == 0 {
        return Err(Error::Config(format!(
            "forest dimensions must be positive, got trees={trees} depth={depth} outputs={outputs}"
        )));
    }
    let mut rng = seed_stream(rng_seed, "init/forest");
    let normal = Normal::new(0.0f64, 0.01).unwrap();
    let decisions = kind.decisions(depth);
    let leaves = 1usize << depth;

    let mut feature_index = Vec::with_capacity(trees * decisions);
    let mut thresholds = Vec::with_capacity(trees * decisions);
    let mut leaf_weights = Vec::with_capacity(trees * leaves * outputs);
    for _ in 0..trees {
        for _ in 0..decisions {
            feature_index.push(rng.random_range(0..in_features));
            thresholds.push(R::from_f64(rng.random_range(-3.0..3.0)));
        }
        for _ in 0..leaves * outputs {
            leaf_weights.push(R::from_f64(normal.sample(&mut rng)));
        }
    }

    Ok(ForestParams {
        kind,
        trees,
        depth,
        in_features,
        outputs,
        feature_index,
        thresholds: Tensor::from_vec(&[trees, decisions], thresholds)?,
        leaf_weights: Tensor::from_vec(&[trees, leaves, outputs], leaf_weights)?,
    })
}

/// Outcome of one traversal: the leaf reached, the signed margin of the
/// smallest-magnitude decision on the path, and the vertex where it occurred.
///
/// Ties keep the shallowest vertex (strict-inequality update). A margin of
/// exactly zero routes left and produces zero forward output and zero
/// gradients downstream (`sgn(0) = 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraversalResult<R: Real> {
    pub leaf: usize,
    pub margin: R,
    pub vertex: usize,
}

/// Walks one hinge tree. `feature_index` and `thresholds` are the member's
/// `2^depth - 1` decisions in breadth-first order. Exactly `depth` decisions
/// are evaluated; `decision_counter` is bumped once per evaluation.
pub fn tree_traverse<R: Real>(
    x: &[R],
    feature_index: &[usize],
    thresholds: &[R],
    depth: usize,
    decision_counter: &mut u64,
) -> TraversalResult<R> {
    let mut leaf = 0usize;
    let mut vertex = 0usize;
    let mut best = R::infinity();
    let mut best_vertex = 0usize;
    for _ in 0..depth {
        let r = x[feature_index[vertex]] - thresholds[vertex];
        *decision_counter += 1;
        if r.abs() < best.abs() {
            best = r;
            best_vertex = vertex;
        }
        let right = usize::from(r > R::zero());
        leaf = 2 * leaf + right;
        vertex = 2 * vertex + right + 1;
    }
    TraversalResult {
        leaf,
        margin: best,
        vertex: best_vertex,
    }
}

/// Walks one hinge fern: decision `i` always reads the level-`i` feature and
/// threshold, shared across all paths, and the reported vertex is the level
/// index.
pub fn fern_traverse<R: Real>(
    x: &[R],
    feature_index: &[usize],
    thresholds: &[R],
    depth: usize,
    decision_counter: &mut u64,
) -> TraversalResult<R> {
    let mut leaf = 0usize;
    let mut best = R::infinity();
    let mut best_vertex = 0usize;
    for level in 0..depth {
        let r = x[feature_index[level]] - thresholds[level];
        *decision_counter += 1;
        if r.abs() < best.abs() {
            best = r;
            best_vertex = level;
        }
        leaf = 2 * leaf + usize::from(r > R::zero());
    }
    TraversalResult {
        leaf,
        margin: best,
        vertex: best_vertex,
    }
}

/// Traversal dispatching on the member kind.
pub fn traverse<R: Real>(
    kind: ForestKind,
    x: &[R],
    feature_index: &[usize],
    thresholds: &[R],
    depth: usize,
    decision_counter: &mut u64,
) -> TraversalResult<R> {
    match kind {
        ForestKind::Tree => tree_traverse(x, feature_index, thresholds, depth, decision_counter),
        ForestKind::Fern => fern_traverse(x, feature_index, thresholds, depth, decision_counter),
    }
}

/// sgn with sgn(0) = 0.
pub(crate) fn sgn<R: Real>(v: R) -> R {
    if v > R::zero() {
        R::one()
    } else if v < R::zero() {
        -R::one()
    } else {
        R::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_shapes_follow_depth_arithmetic() {
        let p = initialize_forest::<f64>(2, 3, 5, 4, ForestKind::Tree, 1).unwrap();
        assert_eq!(p.thresholds.shape(), &[2, 7]);
        assert_eq!(p.leaf_weights.shape(), &[2, 8, 4]);
        assert_eq!(p.feature_index.len(), 14);

        let f = initialize_forest::<f64>(2, 3, 5, 4, ForestKind::Fern, 1).unwrap();
        assert_eq!(f.thresholds.shape(), &[2, 3]);
        assert_eq!(f.leaf_weights.shape(), &[2, 8, 4]);
    }

    #[test]
    fn initialization_matches_the_stated_distributions() {
        // 10^4 leaf weights: sample std must sit near 0.01.
        let p = initialize_forest::<f64>(10, 5, 20, 32, ForestKind::Tree, 7).unwrap();
        assert!(p.leaf_weights.len() >= 10_000);
        for &t in p.thresholds.data() {
            assert!(t > -3.0 && t < 3.0);
        }
        for &i in &p.feature_index {
            assert!(i < 20);
        }
        let weights = &p.leaf_weights.data()[..10_000];
        let mean: f64 = weights.iter().sum::<f64>() / weights.len() as f64;
        let var: f64 =
            weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / weights.len() as f64;
        let std = var.sqrt();
        assert!((0.008..=0.012).contains(&std), "sample std {std}");
    }

    #[test]
    fn same_seed_reproduces_parameters_bitwise() {
        let a = initialize_forest::<f32>(3, 4, 7, 2, ForestKind::Fern, 99).unwrap();
        let b = initialize_forest::<f32>(3, 4, 7, 2, ForestKind::Fern, 99).unwrap();
        assert_eq!(a.thresholds.data(), b.thresholds.data());
        assert_eq!(a.leaf_weights.data(), b.leaf_weights.data());
        assert_eq!(a.feature_index, b.feature_index);
    }

    #[test]
    fn zero_features_is_a_configuration_error() {
        assert!(initialize_forest::<f64>(1, 1, 0, 1, ForestKind::Tree, 1).is_err());
    }

    #[test]
    fn single_decision_traversal() {
        let mut count = 0;
        let r = tree_traverse(&[0.5], &[0], &[0.0], 1, &mut count);
        assert_eq!(r, TraversalResult { leaf: 1, margin: 0.5, vertex: 0 });
        assert_eq!(count, 1);
    }

    #[test]
    fn zero_margin_routes_left() {
        let mut count = 0;
        let r = tree_traverse(&[0.0], &[0], &[0.0], 1, &mut count);
        assert_eq!(r, TraversalResult { leaf: 0, margin: 0.0, vertex: 0 });
    }

    #[test]
    fn depth_two_tie_keeps_the_shallowest_vertex() {
        // Root margin 0.5 goes right to vertex 2, whose margin -0.5 ties in
        // magnitude; the strict update keeps the root as the minimizer.
        let mut count = 0;
        let r = tree_traverse(&[0.5, 0.3], &[0, 1, 0], &[0.0, -1.0, 1.0], 2, &mut count);
        assert_eq!(r, TraversalResult { leaf: 2, margin: 0.5, vertex: 0 });
        assert_eq!(count, 2);
    }

    #[test]
    fn depth_one_fern_equals_depth_one_tree() {
        let mut rng = crate::rng::seed_stream(3, "fern-vs-tree");
        use rand::Rng;
        for _ in 0..100 {
            let x = [rng.random_range(-2.0..2.0)];
            let t = [rng.random_range(-1.0..1.0)];
            let mut c1 = 0;
            let mut c2 = 0;
            let tree = tree_traverse(&x, &[0], &t, 1, &mut c1);
            let fern = fern_traverse(&x, &[0], &t, 1, &mut c2);
            assert_eq!(tree, fern);
        }
    }

    #[test]
    fn fern_depth_two_hand_trace() {
        let mut count = 0;
        let r = fern_traverse(&[1.0, -2.0], &[0, 1], &[0.0, 0.0], 2, &mut count);
        assert_eq!(r, TraversalResult { leaf: 2, margin: 1.0, vertex: 0 });
    }

    #[test]
    fn all_right_fern_reaches_the_last_leaf() {
        let x = [10.0, 10.0, 10.0];
        let t = [2.999, 2.999, 2.999];
        let mut count = 0;
        let r = fern_traverse(&x, &[0, 1, 2], &t, 3, &mut count);
        assert_eq!(r.leaf, 7);
        assert_eq!(count, 3);
    }
}
