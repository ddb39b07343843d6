//! Helpers shared by the unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Op, OpBackward, OpForward};
use crate::real::Real;
use crate::rng::seed_stream;
use crate::tensor::Tensor;

/// Graph wrapping a single layer between the data input and a mean-square
/// scalar: data -> op -> mean_square.
pub fn single_op_graph(op: Box<dyn Op<f64>>, seed: u64) -> Graph<f64> {
    let mut g = Graph::new();
    g.add_input("data").unwrap();
    g.add_input("labels").unwrap();
    g.add_node("layer", &["data"], op, &mut seed_stream(seed, "init/layer"))
        .unwrap();
    g.add_node(
        "loss",
        &["layer", "labels"],
        Box::new(MeanSquareWithLabels),
        &mut seed_stream(seed, "init/loss"),
    )
    .unwrap();
    g.set_data_input("data").unwrap();
    g.set_label_input("labels").unwrap();
    g.set_prediction("layer").unwrap();
    g.set_loss("loss").unwrap();
    g
}

/// Scalar loss `mean(x^2)` over every element of its first input, ignoring
/// the labels input; turns any layer output into a differentiable scalar
/// for finite-difference checks.
pub struct MeanSquareWithLabels;

impl<R: Real> Op<R> for MeanSquareWithLabels {
    fn kind(&self) -> &'static str {
        "mean_square"
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (_, input) = ctx.inputs[0];
        let n = input.len();
        let mut total = R::zero();
        for v in input.data() {
            total = total + *v * *v;
        }
        ctx.output.reset(&[1]);
        ctx.output.data_mut()[0] = total / R::from_f64(n as f64);
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, input) = ctx.inputs[0];
        let n = input.len();
        let scale = R::from_f64(2.0 / n as f64) * ctx.output_grad.data()[0];
        for (d, x) in ctx.input_grads[0].data_mut().iter_mut().zip(input.data()) {
            *d = *d + scale * *x;
        }
        Ok(())
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Runs the central-difference harness over a single-layer graph and
/// asserts the analytic gradients match.
pub fn assert_layer_gradients(op: Box<dyn Op<f64>>, batch: Tensor<f64>, seed: u64) {
    let mut g = single_op_graph(op, seed);
    let labels = Tensor::zeros(&[batch.extent0()]);
    let report = crate::gradcheck::grad_check(&mut g, &batch, &labels, 200, 1e-5, 1e-4, seed)
        .expect("gradient check runs");
    assert!(
        report.passed(),
        "gradient mismatch: max rel error {}, failures {:?}",
        report.max_rel_error,
        report.failures
    );
    assert!(report.checked > 0);
}
