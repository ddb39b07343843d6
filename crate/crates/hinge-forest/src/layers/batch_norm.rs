use rand_chacha::ChaCha8Rng;

use super::expect_rank;
use crate::error::{Error, Result};
use crate::graph::{Op, OpBackward, OpForward, Param};
use crate::real::Real;
use crate::tensor::Tensor;

/// Normalization by running statistics.
///
/// Unlike standard batch normalization there is no learnable scale or shift,
/// training and testing run the same normalization formula, and the backward
/// pass treats the running statistics as constants:
/// `d out / d in = 1 / sqrt(var + eps)`.
///
/// In training mode the running mean and variance are first blended toward
/// the batch statistics, then the batch is normalized with the updated
/// values, so a frozen layer computes bit-identical outputs in both modes.
/// The blend weight ramps like a cumulative average, `1 - alpha` with
/// `alpha = min(t / (t + 1), 0.99)` at the t-th update: the first update
/// adopts the batch statistics outright and later ones settle into a slow
/// moving average. The batch variance is the unbiased estimate.
pub struct RunningBatchNorm {
    features: usize,
    alpha_max: f64,
    epsilon: f64,
    frozen: bool,
}

pub const BN_ALPHA_MAX: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-7;

impl RunningBatchNorm {
    pub fn new(features: usize) -> Self {
        RunningBatchNorm {
            features,
            alpha_max: BN_ALPHA_MAX,
            epsilon: BN_EPSILON,
            frozen: false,
        }
    }
}

impl<R: Real> Op<R> for RunningBatchNorm {
    fn kind(&self) -> &'static str {
        "batch_norm"
    }

    fn init_params(&mut self, _rng: &mut ChaCha8Rng) -> Vec<Param<R>> {
        // Mean 0 / variance 1 makes the layer an identity before any data
        // is seen; "updates" counts stat updates and rides along so saved
        // models resume the blend schedule.
        vec![
            Param::new("mean", Tensor::zeros(&[self.features]), false),
            Param::new("var", Tensor::filled(&[self.features], R::one()), false),
            Param::new("updates", Tensor::zeros(&[1]), false),
        ]
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (input_name, input) = ctx.inputs[0];
        expect_rank(ctx.node, input_name, input, 2)?;
        let n = input.shape()[0];
        let f = input.shape()[1];
        if f != self.features {
            return Err(Error::Config(format!(
                "node '{}' tracks {} features, got {} from node '{}'",
                ctx.node, self.features, f, input_name
            )));
        }
        if n == 0 {
            return Err(Error::State(format!(
                "node '{}': cannot normalize an empty batch",
                ctx.node
            )));
        }

        let x = input.data();
        if ctx.training && !self.frozen {
            let inv_n = 1.0 / n as f64;
            let mut batch_mean = vec![0.0f64; f];
            for i in 0..n {
                for j in 0..f {
                    batch_mean[j] += x[i * f + j].as_f64();
                }
            }
            for bm in &mut batch_mean {
                *bm *= inv_n;
            }
            let mut batch_var = vec![0.0f64; f];
            for i in 0..n {
                for j in 0..f {
                    let d = x[i * f + j].as_f64() - batch_mean[j];
                    batch_var[j] += d * d;
                }
            }
            // Unbiased estimate; a single-example batch contributes zero
            // variance.
            let var_scale = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
            for bv in &mut batch_var {
                *bv *= var_scale;
            }

            let updates = ctx.params[2].value.data()[0].as_f64();
            let alpha = f64::min(updates / (updates + 1.0), self.alpha_max);
            let mean = ctx.params[0].value.data_mut();
            for (m, bm) in mean.iter_mut().zip(&batch_mean) {
                *m = R::from_f64(alpha * m.as_f64() + (1.0 - alpha) * *bm);
            }
            let var = ctx.params[1].value.data_mut();
            for (v, bv) in var.iter_mut().zip(&batch_var) {
                *v = R::from_f64(alpha * v.as_f64() + (1.0 - alpha) * *bv);
            }
            ctx.params[2].value.data_mut()[0] = R::from_f64(updates + 1.0);
        }

        ctx.output.reset(&[n, f]);
        let mean = ctx.params[0].value.data();
        let var = ctx.params[1].value.data();
        let out = ctx.output.data_mut();
        for j in 0..f {
            let divisor = R::from_f64((var[j].as_f64().abs() + self.epsilon).sqrt());
            for i in 0..n {
                out[i * f + j] = (x[i * f + j] - mean[j]) / divisor;
            }
        }
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, input) = ctx.inputs[0];
        let n = input.shape()[0];
        let f = self.features;
        let var = ctx.params[1].value.data().to_vec();
        let g = ctx.output_grad.data();
        let dx = ctx.input_grads[0].data_mut();
        for j in 0..f {
            let inv = R::from_f64(1.0 / (var[j].as_f64().abs() + self.epsilon).sqrt());
            for i in 0..n {
                dx[i * f + j] = dx[i * f + j] + g[i * f + j] * inv;
            }
        }
        Ok(())
    }

    fn set_stats_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}
