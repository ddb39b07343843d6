//! Assembles the experiment architectures into graphs.
//!
//! Flat-feature shape: data -> inner product pool -> running batch norm ->
//! forest -> per-tree mean -> softmax loss (or squared error for regression).
//! Image shape: data -> convolutions -> flatten -> running batch norm ->
//! forest -> per-tree mean -> loss.

use crate::config::{Architecture, FeatureKind, Task};
use crate::error::{Error, Result};
use crate::forest::{initialize_forest, HingeForest};
use crate::graph::Graph;
use crate::layers::{
    Conv2d, Flatten, InnerProduct, L2Loss, RunningBatchNorm, SoftmaxCrossEntropy, TreeMean,
    TreeSum,
};
use crate::real::Real;
use crate::rng::seed_stream;

/// Node names used by every built graph.
pub const DATA: &str = "data";
pub const LABELS: &str = "labels";
pub const FEATURES: &str = "features";
pub const FLATTEN: &str = "flatten";
pub const NORM: &str = "norm";
pub const FOREST: &str = "forest";
pub const AGGREGATE: &str = "aggregate";
pub const LOSS: &str = "loss";

/// Builds a graph for `arch` over examples of shape `example_shape` (feature
/// extents without the batch dimension). `outputs` is the class count for
/// classification and must be 1 for regression. All parameters are drawn
/// from streams derived from `seed` and the node names.
pub fn build_graph<R: Real>(
    arch: &Architecture,
    example_shape: &[usize],
    outputs: usize,
    seed: u64,
) -> Result<Graph<R>> {
    if outputs == 0 {
        return Err(Error::Config("output extent must be at least 1".into()));
    }
    if arch.task == Task::Regression && outputs != 1 {
        return Err(Error::Config(format!(
            "regression expects one output, got {outputs}"
        )));
    }

    let mut graph = Graph::new();
    graph.add_input(DATA)?;
    graph.add_input(LABELS)?;

    // The learnable feature pool, and the flat feature count that reaches
    // the forest.
    let forest_node_input;
    let forest_features;
    match arch.features.kind {
        FeatureKind::InnerProduct => {
            if example_shape.len() != 1 {
                return Err(Error::Config(format!(
                    "inner-product features expect flat examples, got shape {example_shape:?}; \
                     use conv features for image data"
                )));
            }
            let mut rng = seed_stream(seed, &format!("init/{FEATURES}"));
            graph.add_node(
                FEATURES,
                &[DATA],
                Box::new(InnerProduct::new(example_shape[0], arch.features.count)),
                &mut rng,
            )?;
            forest_node_input = FEATURES;
            forest_features = arch.features.count;
        }
        FeatureKind::Conv => {
            if example_shape.len() != 3 {
                return Err(Error::Config(format!(
                    "conv features expect image examples [C, H, W], got shape {example_shape:?}"
                )));
            }
            let conv = Conv2d::new(
                example_shape[0],
                arch.features.kernels,
                arch.features.kernel_size,
                arch.features.stride,
            );
            let h_out = conv.output_extent(example_shape[1]);
            let w_out = conv.output_extent(example_shape[2]);
            let (h_out, w_out) = match (h_out, w_out) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Config(format!(
                        "images {}x{} are smaller than the {} kernel",
                        example_shape[1], example_shape[2], arch.features.kernel_size
                    )))
                }
            };
            let mut rng = seed_stream(seed, &format!("init/{FEATURES}"));
            graph.add_node(FEATURES, &[DATA], Box::new(conv), &mut rng)?;
            let mut rng = seed_stream(seed, &format!("init/{FLATTEN}"));
            graph.add_node(FLATTEN, &[FEATURES], Box::new(Flatten), &mut rng)?;
            forest_node_input = FLATTEN;
            forest_features = arch.features.kernels * h_out * w_out;
        }
        FeatureKind::None => {
            if example_shape.len() != 1 {
                return Err(Error::Config(format!(
                    "raw features expect flat examples, got shape {example_shape:?}"
                )));
            }
            forest_node_input = DATA;
            forest_features = example_shape[0];
        }
    }

    let mut rng = seed_stream(seed, &format!("init/{NORM}"));
    graph.add_node(
        NORM,
        &[forest_node_input],
        Box::new(RunningBatchNorm::new(forest_features)),
        &mut rng,
    )?;

    let forest_params = initialize_forest::<R>(
        arch.forest.trees,
        arch.forest.depth,
        forest_features,
        outputs,
        arch.forest.kind.to_kind(),
        seed,
    )?;
    let mut rng = seed_stream(seed, &format!("init/{FOREST}"));
    graph.add_node(
        FOREST,
        &[NORM],
        Box::new(HingeForest::new(forest_params)),
        &mut rng,
    )?;

    let mut rng = seed_stream(seed, &format!("init/{AGGREGATE}"));
    match arch.forest.aggregation {
        crate::config::Aggregation::Sum => {
            graph.add_node(AGGREGATE, &[FOREST], Box::new(TreeSum), &mut rng)?
        }
        crate::config::Aggregation::Mean => {
            graph.add_node(AGGREGATE, &[FOREST], Box::new(TreeMean), &mut rng)?
        }
    }

    let mut rng = seed_stream(seed, &format!("init/{LOSS}"));
    match arch.task {
        Task::Classification => {
            graph.add_node(
                LOSS,
                &[AGGREGATE, LABELS],
                Box::new(SoftmaxCrossEntropy::new()),
                &mut rng,
            )?;
        }
        Task::Regression => {
            graph.add_node(LOSS, &[AGGREGATE, LABELS], Box::new(L2Loss), &mut rng)?;
        }
    }

    graph.set_data_input(DATA)?;
    graph.set_label_input(LABELS)?;
    graph.set_prediction(AGGREGATE)?;
    graph.set_loss(LOSS)?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FeatureConfig, ForestConfig, ForestKindSpec};
    use crate::tensor::Tensor;

    fn arch(features: FeatureKind, task: Task) -> Architecture {
        Architecture {
            features: FeatureConfig {
                kind: features,
                ..FeatureConfig::default()
            },
            forest: ForestConfig {
                kind: ForestKindSpec::Tree,
                trees: 4,
                depth: 3,
                aggregation: Default::default(),
            },
            task,
        }
    }

    #[test]
    fn flat_architecture_routes_through_a_100_feature_pool() {
        let mut g: crate::graph::Graph<f32> =
            build_graph(&arch(FeatureKind::InnerProduct, Task::Classification), &[16], 26, 1)
                .unwrap();
        let order = g.topological_order().unwrap();
        assert_eq!(
            order,
            vec!["data", "labels", "features", "norm", "forest", "aggregate", "loss"]
        );
        assert_eq!(
            g.param("features", "weights").unwrap().value.shape(),
            &[100, 16]
        );
        let batch = Tensor::zeros(&[3, 16]);
        let labels = Tensor::zeros(&[3]);
        g.run_forward(&batch, &labels).unwrap();
        assert_eq!(g.node_output("aggregate").unwrap().shape(), &[3, 26]);
    }

    #[test]
    fn image_architecture_flattens_to_5120_features() {
        let mut g: crate::graph::Graph<f32> =
            build_graph(&arch(FeatureKind::Conv, Task::Classification), &[1, 28, 28], 10, 1)
                .unwrap();
        let batch = Tensor::zeros(&[2, 1, 28, 28]);
        let labels = Tensor::zeros(&[2]);
        g.run_forward(&batch, &labels).unwrap();
        assert_eq!(g.node_output("flatten").unwrap().shape(), &[2, 5120]);
        assert_eq!(g.param("norm", "mean").unwrap().value.len(), 5120);
    }

    #[test]
    fn regression_uses_scalar_leaves_and_l2_loss() {
        let g: crate::graph::Graph<f32> =
            build_graph(&arch(FeatureKind::InnerProduct, Task::Regression), &[8], 1, 1).unwrap();
        assert_eq!(
            g.param("forest", "leaf_weights").unwrap().value.shape(),
            &[4, 8, 1]
        );
        assert_eq!(g.node_kind("loss").unwrap(), "l2_loss");
    }

    #[test]
    fn conv_features_on_flat_data_are_rejected() {
        let err = match build_graph::<f32>(&arch(FeatureKind::Conv, Task::Classification), &[16], 3, 1) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("conv on flat data must fail"),
        };
        assert!(err.contains("image examples"), "{err}");
    }

    #[test]
    fn same_seed_builds_bitwise_identical_graphs() {
        let build = || {
            build_graph::<f32>(
                &arch(FeatureKind::InnerProduct, Task::Classification),
                &[6],
                3,
                42,
            )
            .unwrap()
        };
        let a = build();
        let b = build();
        let mut pairs: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();
        a.for_each_param(|_, p| pairs.push((p.value.data().to_vec(), Vec::new())));
        let mut i = 0;
        b.for_each_param(|_, p| {
            pairs[i].1 = p.value.data().to_vec();
            i += 1;
        });
        for (x, y) in pairs {
            assert_eq!(x, y);
        }
    }
}
