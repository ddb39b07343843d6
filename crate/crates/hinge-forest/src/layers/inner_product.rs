use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::expect_rank;
use crate::error::{Error, Result};
use crate::graph::{Op, OpBackward, OpForward, Param};
use crate::real::Real;
use crate::tensor::Tensor;

/// Fully connected layer: `out[n,o] = sum_i weights[o,i] * in[n,i] + bias[o]`.
///
/// Weights start as unit Gaussians, bias starts at zero; the normalization
/// layer behind the feature pool makes the initial scale immaterial.
pub struct InnerProduct {
    in_features: usize,
    out_features: usize,
}

impl InnerProduct {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        InnerProduct {
            in_features,
            out_features,
        }
    }
}

impl<R: Real> Op<R> for InnerProduct {
    fn kind(&self) -> &'static str {
        "inner_product"
    }

    fn init_params(&mut self, rng: &mut ChaCha8Rng) -> Vec<Param<R>> {
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let weights: Vec<R> = (0..self.out_features * self.in_features)
            .map(|_| R::from_f64(normal.sample(rng)))
            .collect();
        vec![
            Param::new(
                "weights",
                Tensor::from_vec(&[self.out_features, self.in_features], weights).unwrap(),
                true,
            ),
            Param::new("bias", Tensor::zeros(&[self.out_features]), true),
        ]
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (input_name, input) = ctx.inputs[0];
        expect_rank(ctx.node, input_name, input, 2)?;
        let n = input.shape()[0];
        let f_in = input.shape()[1];
        if f_in != self.in_features {
            return Err(Error::Config(format!(
                "node '{}' expects {} features, got {} from node '{}'",
                ctx.node, self.in_features, f_in, input_name
            )));
        }
        let f_out = self.out_features;
        ctx.output.reset(&[n, f_out]);

        let w = ctx.params[0].value.data();
        let b = ctx.params[1].value.data();
        let x = input.data();
        let out = ctx.output.data_mut();
        for i in 0..n {
            let row = &x[i * f_in..(i + 1) * f_in];
            let out_row = &mut out[i * f_out..(i + 1) * f_out];
            for o in 0..f_out {
                let w_row = &w[o * f_in..(o + 1) * f_in];
                let mut acc = b[o];
                for (wv, xv) in w_row.iter().zip(row) {
                    acc = acc + *wv * *xv;
                }
                out_row[o] = acc;
            }
        }
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, input) = ctx.inputs[0];
        let n = input.shape()[0];
        let f_in = self.in_features;
        let f_out = self.out_features;
        let x = input.data();
        let g = ctx.output_grad.data();
        let w = ctx.params[0].value.data().to_vec();

        {
            let dx = ctx.input_grads[0].data_mut();
            for i in 0..n {
                let g_row = &g[i * f_out..(i + 1) * f_out];
                let dx_row = &mut dx[i * f_in..(i + 1) * f_in];
                for o in 0..f_out {
                    let w_row = &w[o * f_in..(o + 1) * f_in];
                    let gv = g_row[o];
                    for (dxv, wv) in dx_row.iter_mut().zip(w_row) {
                        *dxv = *dxv + gv * *wv;
                    }
                }
            }
        }
        {
            let dw = ctx.params[0].grad.data_mut();
            for i in 0..n {
                let g_row = &g[i * f_out..(i + 1) * f_out];
                let x_row = &x[i * f_in..(i + 1) * f_in];
                for o in 0..f_out {
                    let dw_row = &mut dw[o * f_in..(o + 1) * f_in];
                    let gv = g_row[o];
                    for (dwv, xv) in dw_row.iter_mut().zip(x_row) {
                        *dwv = *dwv + gv * *xv;
                    }
                }
            }
        }
        {
            let db = ctx.params[1].grad.data_mut();
            for i in 0..n {
                let g_row = &g[i * f_out..(i + 1) * f_out];
                for (dbv, gv) in db.iter_mut().zip(g_row) {
                    *dbv = *dbv + *gv;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{assert_layer_gradients, random_tensor, single_op_graph};

    fn forward(graph: &mut crate::graph::Graph<f64>, batch: &Tensor<f64>) -> Tensor<f64> {
        let labels = Tensor::zeros(&[batch.extent0()]);
        graph.run_forward(batch, &labels).unwrap();
        graph.node_output("layer").unwrap().clone()
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut g = single_op_graph(Box::new(InnerProduct::new(3, 3)), 1);
        let w = g.param_mut("layer", "weights").unwrap();
        w.value.fill_zero();
        for i in 0..3 {
            w.value.set(&[i, i], 1.0);
        }
        let batch = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let out = forward(&mut g, &batch);
        assert_eq!(out.data(), batch.data());
    }

    #[test]
    fn zero_weights_emit_the_bias() {
        let mut g = single_op_graph(Box::new(InnerProduct::new(2, 3)), 1);
        g.param_mut("layer", "weights").unwrap().value.fill_zero();
        let bias = g.param_mut("layer", "bias").unwrap();
        bias.value.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let batch = Tensor::from_vec(&[2, 2], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let out = forward(&mut g, &batch);
        assert_eq!(out.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn matches_double_loop_reference() {
        let mut rng = crate::rng::seed_stream(3, "ip-ref");
        let mut g = single_op_graph(Box::new(InnerProduct::new(4, 3)), 3);
        let batch = random_tensor(&[3, 4], &mut rng);
        let out = forward(&mut g, &batch);

        let w = g.param("layer", "weights").unwrap().value.clone();
        let b = g.param("layer", "bias").unwrap().value.clone();
        for n in 0..3 {
            for o in 0..3 {
                let mut expected = b.data()[o];
                for i in 0..4 {
                    expected += w.at(&[o, i]) * batch.at(&[n, i]);
                }
                assert!((out.at(&[n, o]) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inner_extent_mismatch_names_both_nodes() {
        let mut g = single_op_graph(Box::new(InnerProduct::new(5, 3)), 1);
        let batch = Tensor::zeros(&[2, 4]);
        let labels = Tensor::zeros(&[2]);
        let err = g.run_forward(&batch, &labels).unwrap_err().to_string();
        assert!(err.contains("'layer'") && err.contains("'data'"), "{err}");
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = crate::rng::seed_stream(5, "ip-fd");
        let batch = random_tensor(&[4, 3], &mut rng);
        assert_layer_gradients(Box::new(InnerProduct::new(3, 5)), batch, 5);
    }
}
