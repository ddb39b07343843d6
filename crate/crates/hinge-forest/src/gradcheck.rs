//! Central-difference verification of the analytic gradients.
//!
//! The harness runs in 64-bit: it perturbs sampled coordinates of the
//! learnable parameters (and of the data input) by ±h, re-evaluates the
//! loss with statistics frozen, and compares `(L(p+h) - L(p-h)) / 2h`
//! against the analytic gradient. Coordinates whose perturbation crosses a
//! hinge kink are skipped, because the loss is not differentiable across a
//! kink; a crossing is detected exactly, as any change in the cached
//! traversal assignments between the nominal and displaced forwards.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::seed_stream;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct CoordinateReport {
    pub node: String,
    /// Parameter name, or "(input)" for the data tensor.
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub failures: Vec<CoordinateReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone)]
enum Slot {
    Param { node: String, param: String },
    Input { node: String },
}

/// Verifies analytic gradients of `graph` on one batch against central
/// differences. `samples` coordinates are drawn uniformly over all learnable
/// parameters plus the data input tensor.
pub fn grad_check(
    graph: &mut Graph<f64>,
    batch: &Tensor<f64>,
    labels: &Tensor<f64>,
    samples: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    graph.freeze_stats(true);
    graph.set_training(false);
    let result = grad_check_inner(graph, batch, labels, samples, step, tolerance, seed);
    graph.freeze_stats(false);
    result
}

fn grad_check_inner(
    graph: &mut Graph<f64>,
    batch: &Tensor<f64>,
    labels: &Tensor<f64>,
    samples: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    // Enumerate the coordinate space.
    let mut slots: Vec<(Slot, usize)> = Vec::new();
    let mut names: Vec<(String, String)> = Vec::new();
    graph.for_each_learnable(|qualified, param| {
        let (node, pname) = qualified.split_once('.').unwrap();
        names.push((node.to_string(), pname.to_string()));
        let _ = param;
    });
    for (node, pname) in names {
        let len = graph.param(&node, &pname)?.value.len();
        if len > 0 {
            slots.push((
                Slot::Param {
                    node,
                    param: pname,
                },
                len,
            ));
        }
    }
    // The data input is a checkable surface too; labels are not.
    if let Some(node) = graph.data_input_name() {
        slots.push((
            Slot::Input {
                node: node.to_string(),
            },
            batch.len(),
        ));
    }
    let total: usize = slots.iter().map(|(_, len)| len).sum();
    if total == 0 {
        return Err(Error::Config("graph has no checkable coordinates".into()));
    }

    // Analytic pass.
    graph.run_forward(batch, labels)?;
    graph.run_backward()?;
    let nominal_signature = graph.traversal_signature();

    let mut rng = seed_stream(seed, "gradcheck");
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel_error = 0.0f64;
    let mut failures = Vec::new();

    for _ in 0..samples {
        let mut coordinate = rng.random_range(0..total);
        let mut chosen = None;
        for (slot, len) in &slots {
            if coordinate < *len {
                chosen = Some((slot.clone(), coordinate));
                break;
            }
            coordinate -= len;
        }
        let (slot, index) = chosen.expect("coordinate within total");

        let analytic = match &slot {
            Slot::Param { node, param } => graph.param(node, param)?.grad.data()[index],
            Slot::Input { node } => graph.node_grad(node)?.data()[index],
        };

        // Evaluates the loss with one coordinate displaced by `delta`,
        // restoring parameters afterwards. Input coordinates perturb the
        // batch tensor itself since run_forward rewrites the input nodes.
        let eval_displaced = |graph: &mut Graph<f64>, delta: f64| -> Result<(f64, u64)> {
            let loss = match &slot {
                Slot::Param { node, param } => {
                    let original = graph.param(node, param)?.value.data()[index];
                    graph.param_mut(node, param)?.value.data_mut()[index] = original + delta;
                    let loss = graph.run_forward(batch, labels);
                    graph.param_mut(node, param)?.value.data_mut()[index] = original;
                    loss?
                }
                Slot::Input { .. } => {
                    let mut displaced = batch.clone();
                    displaced.data_mut()[index] += delta;
                    graph.run_forward(&displaced, labels)?
                }
            };
            Ok((loss, graph.traversal_signature()))
        };

        let (loss_plus, sig_plus) = eval_displaced(graph, step)?;
        let (loss_minus, sig_minus) = eval_displaced(graph, -step)?;

        // If either displaced forward routed any example differently, the
        // segment [p - h, p + h] crosses a hinge kink and the loss is not
        // differentiable across it.
        if sig_plus != nominal_signature || sig_minus != nominal_signature {
            skipped += 1;
            continue;
        }

        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let rel_error = (analytic - numeric).abs() / f64::max(1e-8, analytic.abs());
        checked += 1;
        if rel_error > max_rel_error {
            max_rel_error = rel_error;
        }
        if rel_error > tolerance {
            let (node, param) = match &slot {
                Slot::Param { node, param } => (node.clone(), param.clone()),
                Slot::Input { node } => (node.clone(), "(input)".to_string()),
            };
            failures.push(CoordinateReport {
                node,
                param,
                index,
                analytic,
                numeric,
                rel_error,
            });
        }
    }

    // Restore a consistent forward/backward state at the nominal point.
    graph.run_forward(batch, labels)?;
    graph.run_backward()?;

    Ok(GradCheckReport {
        checked,
        skipped,
        max_rel_error,
        failures,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Op, OpBackward, OpForward};
    use crate::layers::InnerProduct;
    use crate::test_util::{random_tensor, single_op_graph};

    #[test]
    fn purely_linear_graph_matches_to_1e6() {
        let mut g = single_op_graph(Box::new(InnerProduct::new(4, 3)), 2);
        let mut rng = seed_stream(2, "lin");
        let batch = random_tensor(&[3, 4], &mut rng);
        let labels = Tensor::zeros(&[3]);
        let report = grad_check(&mut g, &batch, &labels, 150, 1e-4, 1e-6, 2).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-6);
        assert_eq!(report.skipped, 0);
    }

    /// Inner product whose backward deliberately scales the weight gradient
    /// wrong; the harness must flag it.
    struct CorruptedBackward(InnerProduct);

    impl Op<f64> for CorruptedBackward {
        fn kind(&self) -> &'static str {
            "corrupted"
        }

        fn init_params(&mut self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<crate::graph::Param<f64>> {
            self.0.init_params(rng)
        }

        fn forward(&mut self, ctx: OpForward<'_, f64>) -> Result<()> {
            self.0.forward(ctx)
        }

        fn backward(&mut self, ctx: OpBackward<'_, f64>) -> Result<()> {
            let OpBackward {
                node,
                inputs,
                input_grads,
                output,
                output_grad,
                params,
            } = ctx;
            self.0.backward(OpBackward {
                node,
                inputs,
                input_grads: &mut *input_grads,
                output,
                output_grad,
                params: &mut *params,
            })?;
            for v in params[0].grad.data_mut() {
                *v *= 1.5;
            }
            Ok(())
        }
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let mut g = single_op_graph(Box::new(CorruptedBackward(InnerProduct::new(3, 2))), 4);
        let mut rng = seed_stream(4, "corrupt");
        let batch = random_tensor(&[4, 3], &mut rng);
        let labels = Tensor::zeros(&[4]);
        let report = grad_check(&mut g, &batch, &labels, 200, 1e-5, 1e-4, 4).unwrap();
        assert!(!report.passed());
        assert!(report.failures.iter().any(|f| f.param == "weights"));
    }
}
