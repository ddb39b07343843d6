use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::expect_rank;
use crate::error::{Error, Result};
use crate::graph::{Op, OpBackward, OpForward, Param};
use crate::real::Real;
use crate::tensor::Tensor;

/// Valid 2-D cross-correlation with a fixed stride and no padding.
///
/// Input is `[N, C, H, W]`, kernels are `[K, C, kh, kw]`, output is
/// `[N, K, H', W']` with `H' = (H - kh) / stride + 1`.
pub struct Conv2d {
    in_channels: usize,
    kernels: usize,
    kernel_size: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, kernels: usize, kernel_size: usize, stride: usize) -> Self {
        Conv2d {
            in_channels,
            kernels,
            kernel_size,
            stride,
        }
    }

    pub fn output_extent(&self, input_extent: usize) -> Option<usize> {
        if input_extent < self.kernel_size {
            None
        } else {
            Some((input_extent - self.kernel_size) / self.stride + 1)
        }
    }
}

impl<R: Real> Op<R> for Conv2d {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn init_params(&mut self, rng: &mut ChaCha8Rng) -> Vec<Param<R>> {
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let count = self.kernels * self.in_channels * self.kernel_size * self.kernel_size;
        let kernels: Vec<R> = (0..count).map(|_| R::from_f64(normal.sample(rng))).collect();
        vec![
            Param::new(
                "kernels",
                Tensor::from_vec(
                    &[
                        self.kernels,
                        self.in_channels,
                        self.kernel_size,
                        self.kernel_size,
                    ],
                    kernels,
                )
                .unwrap(),
                true,
            ),
            Param::new("bias", Tensor::zeros(&[self.kernels]), true),
        ]
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (input_name, input) = ctx.inputs[0];
        expect_rank(ctx.node, input_name, input, 4)?;
        let [n, c, h, w] = [
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        ];
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "node '{}' expects {} channels, got {} from node '{}'",
                ctx.node, self.in_channels, c, input_name
            )));
        }
        let (h_out, w_out) = match (self.output_extent(h), self.output_extent(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "node '{}': input {}x{} from node '{}' is smaller than the {}x{} kernel",
                    ctx.node, h, w, input_name, self.kernel_size, self.kernel_size
                )))
            }
        };
        let k = self.kernels;
        let ks = self.kernel_size;
        let s = self.stride;
        ctx.output.reset(&[n, k, h_out, w_out]);

        let ker = ctx.params[0].value.data();
        let bias = ctx.params[1].value.data();
        let x = input.data();
        let out = ctx.output.data_mut();
        for i in 0..n {
            for ko in 0..k {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = bias[ko];
                        for ci in 0..c {
                            let x_base = ((i * c + ci) * h + oy * s) * w + ox * s;
                            let k_base = ((ko * c + ci) * ks) * ks;
                            for p in 0..ks {
                                let x_row = &x[x_base + p * w..x_base + p * w + ks];
                                let k_row = &ker[k_base + p * ks..k_base + (p + 1) * ks];
                                for (xv, kv) in x_row.iter().zip(k_row) {
                                    acc = acc + *xv * *kv;
                                }
                            }
                        }
                        out[((i * k + ko) * h_out + oy) * w_out + ox] = acc;
                    }
                }
            }
        }
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, input) = ctx.inputs[0];
        let [n, c, h, w] = [
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        ];
        let (h_out, w_out) = (
            self.output_extent(h).unwrap(),
            self.output_extent(w).unwrap(),
        );
        let k = self.kernels;
        let ks = self.kernel_size;
        let s = self.stride;
        let x = input.data();
        let g = ctx.output_grad.data();
        let ker = ctx.params[0].value.data().to_vec();

        {
            let dx = ctx.input_grads[0].data_mut();
            let (kernel_params, bias_params) = ctx.params.split_at_mut(1);
            let dker = kernel_params[0].grad.data_mut();
            let dbias = bias_params[0].grad.data_mut();
            for i in 0..n {
                for ko in 0..k {
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let gv = g[((i * k + ko) * h_out + oy) * w_out + ox];
                            dbias[ko] = dbias[ko] + gv;
                            for ci in 0..c {
                                let x_base = ((i * c + ci) * h + oy * s) * w + ox * s;
                                let k_base = ((ko * c + ci) * ks) * ks;
                                for p in 0..ks {
                                    for q in 0..ks {
                                        let xi = x_base + p * w + q;
                                        let ki = k_base + p * ks + q;
                                        dx[xi] = dx[xi] + gv * ker[ki];
                                        dker[ki] = dker[ki] + gv * x[xi];
                                    }
                                }
                            }
                        }
                    }
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

    #[test]
    fn mnist_shape_flattens_to_5120() {
        let conv = Conv2d::new(1, 80, 5, 3);
        assert_eq!(conv.output_extent(28), Some(8));
        let mut g = single_op_graph(Box::new(Conv2d::new(1, 80, 5, 3)), 1);
        let batch = Tensor::zeros(&[1, 1, 28, 28]);
        let labels = Tensor::zeros(&[1]);
        g.run_forward(&batch, &labels).unwrap();
        let out = g.node_output("layer").unwrap();
        assert_eq!(out.shape(), &[1, 80, 8, 8]);
        assert_eq!(out.len(), 5120);
    }

    #[test]
    fn delta_kernel_subsamples_center_taps() {
        let mut g = single_op_graph(Box::new(Conv2d::new(1, 1, 5, 3)), 1);
        {
            let k = g.param_mut("layer", "kernels").unwrap();
            k.value.fill_zero();
            k.value.set(&[0, 0, 2, 2], 1.0);
        }
        let mut rng = crate::rng::seed_stream(17, "conv-delta");
        let batch = random_tensor(&[1, 1, 11, 11], &mut rng);
        let labels = Tensor::zeros(&[1]);
        g.run_forward(&batch, &labels).unwrap();
        let out = g.node_output("layer").unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(out.at(&[0, 0, oy, ox]), batch.at(&[0, 0, oy * 3 + 2, ox * 3 + 2]));
            }
        }
    }

    #[test]
    fn matches_six_loop_reference() {
        let mut rng = crate::rng::seed_stream(19, "conv-ref");
        let mut g = single_op_graph(Box::new(Conv2d::new(1, 2, 3, 2)), 19);
        let batch = random_tensor(&[1, 1, 8, 8], &mut rng);
        let labels = Tensor::zeros(&[1]);
        g.run_forward(&batch, &labels).unwrap();
        let out = g.node_output("layer").unwrap().clone();
        let kernels = g.param("layer", "kernels").unwrap().value.clone();
        let bias = g.param("layer", "bias").unwrap().value.clone();

        assert_eq!(out.shape(), &[1, 2, 3, 3]);
        for k in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut expected = bias.data()[k];
                    for p in 0..3 {
                        for q in 0..3 {
                            expected += kernels.at(&[k, 0, p, q])
                                * batch.at(&[0, 0, oy * 2 + p, ox * 2 + q]);
                        }
                    }
                    assert!((out.at(&[0, k, oy, ox]) - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn input_smaller_than_kernel_is_rejected() {
        let mut g = single_op_graph(Box::new(Conv2d::new(1, 2, 5, 3)), 1);
        let batch = Tensor::zeros(&[1, 1, 4, 4]);
        let labels = Tensor::zeros(&[1]);
        let err = g.run_forward(&batch, &labels).unwrap_err().to_string();
        assert!(err.contains("smaller than"), "{err}");
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = crate::rng::seed_stream(23, "conv-fd");
        let batch = random_tensor(&[2, 1, 8, 8], &mut rng);
        assert_layer_gradients(Box::new(Conv2d::new(1, 2, 5, 3)), batch, 23);
    }
}
