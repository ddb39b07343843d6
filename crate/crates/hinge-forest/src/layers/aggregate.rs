use super::expect_rank;
use crate::error::Result;
use crate::graph::{Op, OpBackward, OpForward};
use crate::real::Real;

/// Sums per-tree predictions: `[N, M, K] -> [N, K]`.
///
/// Summation lets the ensemble's logit scale grow with every member, so
/// small per-leaf weights add up to confident predictions quickly; it is
/// the aggregation the built-in architectures use.
pub struct TreeSum;

impl<R: Real> Op<R> for TreeSum {
    fn kind(&self) -> &'static str {
        "tree_sum"
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (input_name, input) = ctx.inputs[0];
        expect_rank(ctx.node, input_name, input, 3)?;
        let [n, m, k] = [input.shape()[0], input.shape()[1], input.shape()[2]];
        ctx.output.reset(&[n, k]);
        let x = input.data();
        let out = ctx.output.data_mut();
        for i in 0..n {
            for t in 0..m {
                let row = &x[(i * m + t) * k..(i * m + t + 1) * k];
                let out_row = &mut out[i * k..(i + 1) * k];
                for (o, v) in out_row.iter_mut().zip(row) {
                    *o = *o + *v;
                }
            }
        }
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, input) = ctx.inputs[0];
        let [n, m, k] = [input.shape()[0], input.shape()[1], input.shape()[2]];
        let g = ctx.output_grad.data();
        let dx = ctx.input_grads[0].data_mut();
        for i in 0..n {
            for t in 0..m {
                let dx_row = &mut dx[(i * m + t) * k..(i * m + t + 1) * k];
                let g_row = &g[i * k..(i + 1) * k];
                for (d, gv) in dx_row.iter_mut().zip(g_row) {
                    *d = *d + *gv;
                }
            }
        }
        Ok(())
    }
}

/// Averages per-tree predictions: `[N, M, K] -> [N, K]`.
///
/// The mean keeps the aggregated logit scale independent of the number of
/// trees; the backward hands each tree `grad / M`.
pub struct TreeMean;

impl<R: Real> Op<R> for TreeMean {
    fn kind(&self) -> &'static str {
        "tree_mean"
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (input_name, input) = ctx.inputs[0];
        expect_rank(ctx.node, input_name, input, 3)?;
        let [n, m, k] = [input.shape()[0], input.shape()[1], input.shape()[2]];
        ctx.output.reset(&[n, k]);
        let x = input.data();
        let out = ctx.output.data_mut();
        let inv_m = R::one() / R::from_f64(m as f64);
        for i in 0..n {
            for t in 0..m {
                let row = &x[(i * m + t) * k..(i * m + t + 1) * k];
                let out_row = &mut out[i * k..(i + 1) * k];
                for (o, v) in out_row.iter_mut().zip(row) {
                    *o = *o + *v * inv_m;
                }
            }
        }
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, input) = ctx.inputs[0];
        let [n, m, k] = [input.shape()[0], input.shape()[1], input.shape()[2]];
        let g = ctx.output_grad.data();
        let dx = ctx.input_grads[0].data_mut();
        let inv_m = R::one() / R::from_f64(m as f64);
        for i in 0..n {
            for t in 0..m {
                let dx_row = &mut dx[(i * m + t) * k..(i * m + t + 1) * k];
                let g_row = &g[i * k..(i + 1) * k];
                for (d, gv) in dx_row.iter_mut().zip(g_row) {
                    *d = *d + *gv * inv_m;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::test_util::{assert_layer_gradients, random_tensor, single_op_graph};

    fn forward(batch: Tensor<f64>) -> Tensor<f64> {
        let mut g = single_op_graph(Box::new(TreeMean), 1);
        let labels = Tensor::zeros(&[batch.extent0()]);
        g.run_forward(&batch, &labels).unwrap();
        g.node_output("layer").unwrap().clone()
    }

    #[test]
    fn single_tree_is_a_squeeze() {
        let batch = Tensor::from_vec(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = forward(batch);
        assert_eq!(out.shape(), &[2, 3]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn opposite_trees_cancel() {
        let batch = Tensor::from_vec(&[1, 2, 2], vec![1.5, -0.5, -1.5, 0.5]).unwrap();
        let out = forward(batch);
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matches_direct_mean() {
        let mut rng = crate::rng::seed_stream(11, "agg-ref");
        let batch = random_tensor(&[2, 3, 4], &mut rng);
        let out = forward(batch.clone());
        for n in 0..2 {
            for k in 0..4 {
                let mut expected = 0.0;
                for m in 0..3 {
                    expected += batch.at(&[n, m, k]);
                }
                expected /= 3.0;
                assert!((out.at(&[n, k]) - expected).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = crate::rng::seed_stream(13, "agg-fd");
        let batch = random_tensor(&[3, 4, 2], &mut rng);
        assert_layer_gradients(Box::new(TreeMean), batch, 13);
    }
}
