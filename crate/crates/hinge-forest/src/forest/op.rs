use rand_chacha::ChaCha8Rng;

use super::{sgn, traverse, ForestKind, ForestParams, TraversalResult};
use crate::error::{Error, Result};
use crate::graph::{Op, OpBackward, OpForward, Param};
use crate::layers::expect_rank;
use crate::real::Real;
use crate::tensor::Tensor;

/// Graph op evaluating a whole forest of hinge trees or ferns.
///
/// Forward maps `[N, F] -> [N, M, K]` where member `m` contributes
/// `leaf_weights[m, leaf, :] * |margin|` from its traversal of each example;
/// the traversal results are cached for the backward pass. Backward touches,
/// per example and member, exactly one input feature, one threshold and one
/// leaf row; the gradients are extremely sparse.
///
/// Thresholds and leaf weights are learnable; feature indices are fixed at
/// initialization and stored as a non-learnable parameter so they persist
/// with the model.
pub struct HingeForest<R: Real> {
    kind: ForestKind,
    trees: usize,
    depth: usize,
    in_features: usize,
    outputs: usize,
    init: Option<ForestParams<R>>,
    feature_index: Vec<usize>,
    cache: Vec<TraversalResult<R>>,
    cached_examples: usize,
    decisions_evaluated: u64,
}

impl<R: Real> HingeForest<R> {
    /// Wraps pre-initialized parameters (see
    /// [`initialize_forest`](super::initialize_forest)).
    pub fn new(params: ForestParams<R>) -> Self {
        HingeForest {
            kind: params.kind,
            trees: params.trees,
            depth: params.depth,
            in_features: params.in_features,
            outputs: params.outputs,
            feature_index: params.feature_index.clone(),
            init: Some(params),
            cache: Vec::new(),
            cached_examples: 0,
            decisions_evaluated: 0,
        }
    }

    pub fn kind(&self) -> ForestKind {
        self.kind
    }

    pub fn trees(&self) -> usize {
        self.trees
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    fn decisions_per_tree(&self) -> usize {
        self.kind.decisions(self.depth)
    }

    fn leaves(&self) -> usize {
        1 << self.depth
    }

    /// Traversal results of the last forward pass, laid out example-major:
    /// `cache[n * trees + m]`.
    pub fn cached_traversals(&self) -> &[TraversalResult<R>] {
        &self.cache
    }
}

impl<R: Real> Op<R> for HingeForest<R> {
    fn kind(&self) -> &'static str {
        match self.kind {
            ForestKind::Tree => "hinge_forest",
            ForestKind::Fern => "hinge_fern",
        }
    }

    fn init_params(&mut self, _rng: &mut ChaCha8Rng) -> Vec<Param<R>> {
        let params = self.init.take().expect("forest parameters already consumed");
        let decisions = self.decisions_per_tree();
        let features: Vec<R> = params
            .feature_index
            .iter()
            .map(|&i| R::from_f64(i as f64))
            .collect();
        vec![
            Param::new("thresholds", params.thresholds, true),
            Param::new("leaf_weights", params.leaf_weights, true),
            Param::new(
                "features",
                Tensor::from_vec(&[self.trees, decisions], features).unwrap(),
                false,
            ),
        ]
    }

    fn params_loaded(&mut self, params: &[Param<R>]) {
        self.feature_index = params[2]
            .value
            .data()
            .iter()
            .map(|v| v.as_f64() as usize)
            .collect();
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (input_name, input) = ctx.inputs[0];
        expect_rank(ctx.node, input_name, input, 2)?;
        let n = input.shape()[0];
        let f = input.shape()[1];
        if let Some(&bad) = self.feature_index.iter().find(|&&i| i >= f) {
            return Err(Error::Config(format!(
                "node '{}': feature index {bad} out of range for {f} features from node '{input_name}'",
                ctx.node
            )));
        }
        let m = self.trees;
        let k = self.outputs;
        let decisions = self.decisions_per_tree();
        let leaves = self.leaves();
        ctx.output.reset(&[n, m, k]);

        self.cache.clear();
        self.cache.reserve(n * m);
        self.cached_examples = n;

        let thresholds = ctx.params[0].value.data();
        let weights = ctx.params[1].value.data();
        let x = input.data();
        let out = ctx.output.data_mut();
        for i in 0..n {
            let row = &x[i * f..(i + 1) * f];
            for t in 0..m {
                let result = traverse(
                    self.kind,
                    row,
                    &self.feature_index[t * decisions..(t + 1) * decisions],
                    &thresholds[t * decisions..(t + 1) * decisions],
                    self.depth,
                    &mut self.decisions_evaluated,
                );
                let scale = result.margin.abs();
                let w_row = &weights[(t * leaves + result.leaf) * k..(t * leaves + result.leaf + 1) * k];
                let out_row = &mut out[(i * m + t) * k..(i * m + t + 1) * k];
                for (o, w) in out_row.iter_mut().zip(w_row) {
                    *o = *w * scale;
                }
                self.cache.push(result);
            }
        }
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, input) = ctx.inputs[0];
        let n = input.shape()[0];
        if self.cache.len() != n * self.trees || self.cached_examples != n {
            return Err(Error::State(format!(
                "node '{}': backward called without a matching forward",
                ctx.node
            )));
        }
        let f = input.shape()[1];
        let m = self.trees;
        let k = self.outputs;
        let decisions = self.decisions_per_tree();
        let leaves = self.leaves();
        let g = ctx.output_grad.data();
        let weights = ctx.params[1].value.data().to_vec();

        let dx = ctx.input_grads[0].data_mut();
        for i in 0..n {
            for t in 0..m {
                let r = &self.cache[i * m + t];
                let g_row = &g[(i * m + t) * k..(i * m + t + 1) * k];
                let w_row = &weights[(t * leaves + r.leaf) * k..(t * leaves + r.leaf + 1) * k];
                let mut dot = R::zero();
                for (gv, wv) in g_row.iter().zip(w_row) {
                    dot = dot + *gv * *wv;
                }
                let direction = sgn(r.margin);
                dx[i * f + self.feature_index[t * decisions + r.vertex]] =
                    dx[i * f + self.feature_index[t * decisions + r.vertex]] + dot * direction;
            }
        }

        let dthresh = ctx.params[0].grad.data_mut();
        for i in 0..n {
            for t in 0..m {
                let r = &self.cache[i * m + t];
                let g_row = &g[(i * m + t) * k..(i * m + t + 1) * k];
                let w_row = &weights[(t * leaves + r.leaf) * k..(t * leaves + r.leaf + 1) * k];
                let mut dot = R::zero();
                for (gv, wv) in g_row.iter().zip(w_row) {
                    dot = dot + *gv * *wv;
                }
                dthresh[t * decisions + r.vertex] =
                    dthresh[t * decisions + r.vertex] - dot * sgn(r.margin);
            }
        }

        let dweights = ctx.params[1].grad.data_mut();
        for i in 0..n {
            for t in 0..m {
                let r = &self.cache[i * m + t];
                let g_row = &g[(i * m + t) * k..(i * m + t + 1) * k];
                let scale = r.margin.abs();
                let dw_row =
                    &mut dweights[(t * leaves + r.leaf) * k..(t * leaves + r.leaf + 1) * k];
                for (dw, gv) in dw_row.iter_mut().zip(g_row) {
                    *dw = *dw + *gv * scale;
                }
            }
        }
        Ok(())
    }

    fn cached_min_margin(&self) -> Option<f64> {
        self.cache
            .iter()
            .map(|r| r.margin.abs().as_f64())
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.min(v))))
    }

    fn traversal_signature(&self) -> Option<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for r in &self.cache {
            mix(r.leaf as u64);
            mix(r.vertex as u64);
            mix(if r.margin > R::zero() {
                2
            } else if r.margin < R::zero() {
                1
            } else {
                0
            });
        }
        Some(h)
    }

    fn decision_count(&self) -> Option<u64> {
        Some(self.decisions_evaluated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{initialize_forest, reference};
    use crate::rng::seed_stream;
    use rand::Rng;

    struct Standalone {
        op: HingeForest<f64>,
        params: Vec<Param<f64>>,
    }

    impl Standalone {
        fn new(forest: ForestParams<f64>) -> Self {
            let mut op = HingeForest::new(forest);
            let params =
                crate::graph::Op::init_params(&mut op, &mut seed_stream(0, "standalone"));
            Standalone { op, params }
        }

        fn forward(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
            let mut output = Tensor::default();
            self.op
                .forward(OpForward {
                    node: "forest",
                    inputs: &[("data", x)],
                    output: &mut output,
                    params: &mut self.params,
                    training: true,
                })
                .unwrap();
            output
        }

        fn backward(
            &mut self,
            x: &Tensor<f64>,
            output: &Tensor<f64>,
            output_grad: &Tensor<f64>,
        ) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
            let mut input_grads = vec![Tensor::zeros(x.shape())];
            for p in self.params.iter_mut() {
                p.grad.fill_zero();
            }
            self.op
                .backward(OpBackward {
                    node: "forest",
                    inputs: &[("data", x)],
                    input_grads: &mut input_grads,
                    output,
                    output_grad,
                    params: &mut self.params,
                })
                .unwrap();
            (
                input_grads.pop().unwrap(),
                self.params[0].grad.clone(),
                self.params[1].grad.clone(),
            )
        }
    }

    /// Hand-built single tree: depth 1, one feature, threshold 0, leaf
    /// weights [w_left, w_right].
    fn stump(w_left: f64, w_right: f64) -> ForestParams<f64> {
        ForestParams {
            kind: ForestKind::Tree,
            trees: 1,
            depth: 1,
            in_features: 1,
            outputs: 1,
            feature_index: vec![0],
            thresholds: Tensor::from_vec(&[1, 1], vec![0.0]).unwrap(),
            leaf_weights: Tensor::from_vec(&[1, 2, 1], vec![w_left, w_right]).unwrap(),
        }
    }

    #[test]
    fn zero_margin_outputs_the_zero_vector() {
        let mut f = Standalone::new(stump(3.0, 2.0));
        let x = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let out = f.forward(&x);
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn zero_weights_output_zero_everywhere() {
        let params = ForestParams {
            leaf_weights: Tensor::zeros(&[1, 2, 1]),
            ..stump(0.0, 0.0)
        };
        let mut f = Standalone::new(params);
        let x = Tensor::from_vec(&[3, 1], vec![-1.0, 0.3, 2.0]).unwrap();
        let out = f.forward(&x);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn worked_backward_example() {
        // Leaf weight 2 on the right leaf, x = 0.5: margin 0.5, upstream
        // gradient 1 puts +2 on the input feature, -2 on the threshold, and
        // 0.5 on the visited leaf row.
        let mut f = Standalone::new(stump(7.0, 2.0));
        let x = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let out = f.forward(&x);
        assert_eq!(out.data(), &[2.0 * 0.5]);
        let ones = Tensor::filled(&[1, 1, 1], 1.0);
        let (dx, dt, dw) = f.backward(&x, &out, &ones);
        assert_eq!(dx.data(), &[2.0]);
        assert_eq!(dt.data(), &[-2.0]);
        assert_eq!(dw.data(), &[0.0, 0.5]);
    }

    #[test]
    fn zero_margin_zeroes_every_gradient() {
        let mut f = Standalone::new(stump(7.0, 2.0));
        let x = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let out = f.forward(&x);
        let ones = Tensor::filled(&[1, 1, 1], 1.0);
        let (dx, dt, dw) = f.backward(&x, &out, &ones);
        assert_eq!(dx.data(), &[0.0]);
        assert_eq!(dt.data(), &[0.0]);
        assert_eq!(dw.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut op = HingeForest::new(stump(1.0, 1.0));
        let mut params = crate::graph::Op::init_params(&mut op, &mut seed_stream(0, "s"));
        let x = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let out = Tensor::zeros(&[1, 1, 1]);
        let g = Tensor::zeros(&[1, 1, 1]);
        let mut input_grads = vec![Tensor::zeros(&[1, 1])];
        let err = op
            .backward(OpBackward {
                node: "forest",
                inputs: &[("data", &x)],
                input_grads: &mut input_grads,
                output: &out,
                output_grad: &g,
                params: &mut params,
            })
            .unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err}");
    }

    #[test]
    fn out_of_range_feature_index_is_rejected() {
        let params = ForestParams {
            feature_index: vec![5],
            ..stump(1.0, 1.0)
        };
        let mut f = Standalone::new(params);
        let x = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let mut output = Tensor::default();
        let err = f
            .op
            .forward(OpForward {
                node: "forest",
                inputs: &[("data", &x)],
                output: &mut output,
                params: &mut f.params,
                training: true,
            })
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn forward_matches_the_leaf_sum_reference() {
        let mut rng = seed_stream(11, "op-vs-reference");
        for case in 0..300 {
            let depth = rng.random_range(1..=6usize);
            let features = rng.random_range(1..=20usize);
            let outputs = rng.random_range(1..=3usize);
            let kind = if case % 2 == 0 {
                ForestKind::Tree
            } else {
                ForestKind::Fern
            };
            let forest =
                initialize_forest::<f64>(1, depth, features, outputs, kind, case as u64).unwrap();
            let reference_view = forest.clone();
            let mut f = Standalone::new(forest);
            let x: Vec<f64> = (0..features)
                .map(|_| rng.random_range(-3.5..3.5))
                .collect();
            let out = f.forward(&Tensor::from_vec(&[1, features], x.clone()).unwrap());
            let (fi, th, lw) = reference_view.member(0);
            let expected = reference::leaf_sum(kind, &x, fi, th, lw, depth, outputs);
            for (o, e) in out.data().iter().zip(&expected) {
                assert!((o - e).abs() < 1e-6, "case {case}: {o} vs {e}");
            }
        }
    }

    #[test]
    fn per_example_gradients_touch_one_threshold_and_one_leaf_row() {
        let mut rng = seed_stream(13, "sparsity");
        let trees = 4;
        let depth = 3;
        let features = 6;
        let outputs = 2;
        let forest =
            initialize_forest::<f64>(trees, depth, features, outputs, ForestKind::Tree, 21)
                .unwrap();
        let mut f = Standalone::new(forest);
        let n = 5;
        let x: Vec<f64> = (0..n * features)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let x = Tensor::from_vec(&[n, features], x).unwrap();
        let out = f.forward(&x);
        let traversals = f.op.cached_traversals().to_vec();

        for example in 0..n {
            for tree in 0..trees {
                // Upstream gradient nonzero only at this (example, tree).
                let mut g = Tensor::zeros(&[n, trees, outputs]);
                for k in 0..outputs {
                    g.set(&[example, tree, k], 1.0 + k as f64);
                }
                let (_, dt, dw) = f.backward(&x, &out, &g);
                let r = traversals[example * trees + tree];
                let nonzero_thresholds: Vec<usize> = dt
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, _)| i)
                    .collect();
                let nonzero_leaf_rows: Vec<usize> = (0..trees * (1 << depth))
                    .filter(|row| {
                        dw.data()[row * outputs..(row + 1) * outputs]
                            .iter()
                            .any(|v| *v != 0.0)
                    })
                    .collect();
                if r.margin != 0.0 {
                    assert_eq!(
                        nonzero_thresholds,
                        vec![tree * ((1 << depth) - 1) + r.vertex]
                    );
                    assert_eq!(nonzero_leaf_rows, vec![tree * (1 << depth) + r.leaf]);
                } else {
                    assert!(nonzero_thresholds.is_empty());
                    assert!(nonzero_leaf_rows.is_empty());
                }
            }
        }
    }

    #[test]
    fn decision_counter_is_batch_times_trees_times_depth() {
        for depth in [1usize, 3, 6] {
            for kind in [ForestKind::Tree, ForestKind::Fern] {
                let forest = initialize_forest::<f64>(3, depth, 4, 1, kind, 5).unwrap();
                let mut f = Standalone::new(forest);
                let n = 7;
                let x = Tensor::zeros(&[n, 4]);
                f.forward(&x);
                assert_eq!(
                    crate::graph::Op::decision_count(&f.op),
                    Some((n * 3 * depth) as u64)
                );
            }
        }
    }

    #[test]
    fn output_is_affine_between_kinks() {
        // Along a segment that crosses no hinge and keeps the leaf/vertex
        // assignment fixed, the tree output must be collinear.
        let mut rng = seed_stream(17, "piecewise");
        let mut checked = 0;
        for case in 0..100u64 {
            let forest = initialize_forest::<f64>(2, 3, 4, 2, ForestKind::Tree, case).unwrap();
            let mut f = Standalone::new(forest);
            let base: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps = 1e-4;
            let points: Vec<Tensor<f64>> = (0..3)
                .map(|i| {
                    let x: Vec<f64> = base
                        .iter()
                        .zip(&dir)
                        .map(|(b, d)| b + d * eps * i as f64)
                        .collect();
                    Tensor::from_vec(&[1, 4], x).unwrap()
                })
                .collect();
            let mut outs = Vec::new();
            let mut assignments = Vec::new();
            for p in &points {
                outs.push(f.forward(p));
                assignments.push(
                    f.op.cached_traversals()
                        .iter()
                        .map(|t| (t.leaf, t.vertex, t.margin > 0.0))
                        .collect::<Vec<_>>(),
                );
            }
            if assignments[0] != assignments[1] || assignments[1] != assignments[2] {
                continue; // crossed a kink; not a linear segment
            }
            checked += 1;
            for j in 0..outs[0].len() {
                let a = outs[0].data()[j];
                let b = outs[1].data()[j];
                let c = outs[2].data()[j];
                assert!(
                    (b - (a + c) / 2.0).abs() < 1e-9,
                    "case {case}: {a} {b} {c}"
                );
            }
        }
        assert!(checked > 50, "too few linear segments sampled: {checked}");
    }

    #[test]
    fn graph_gradients_match_central_differences() {
        let forest = initialize_forest::<f64>(3, 3, 4, 2, ForestKind::Tree, 31).unwrap();
        let mut rng = seed_stream(37, "forest-fd");
        let x: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-2.5..2.5)).collect();
        let batch = Tensor::from_vec(&[5, 4], x).unwrap();
        crate::test_util::assert_layer_gradients(Box::new(HingeForest::new(forest)), batch, 37);
    }
}
