use super::expect_rank;
use crate::error::{Error, Result};
use crate::graph::{Op, OpBackward, OpForward};
use crate::real::Real;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch.
///
/// Inputs are `(logits [N, K], labels [N])`; labels hold class indices. The
/// forward subtracts the row maximum before exponentiating so saturated
/// logits stay finite, and the backward is `(softmax - onehot) / N`, which
/// already carries the batch mean.
pub struct SoftmaxCrossEntropy {
    softmax: Tensor<f64>,
}

impl SoftmaxCrossEntropy {
    pub fn new() -> Self {
        SoftmaxCrossEntropy {
            softmax: Tensor::default(),
        }
    }
}

impl Default for SoftmaxCrossEntropy {
    fn default() -> Self {
        Self::new()
    }
}

fn label_index<R: Real>(node: &str, raw: R, classes: usize, row: usize) -> Result<usize> {
    let v = raw.as_f64();
    let idx = v as usize;
    if v < 0.0 || v.fract() != 0.0 || idx >= classes {
        return Err(Error::Data(format!(
            "node '{node}': label {v} at row {row} is outside 0..{classes}"
        )));
    }
    Ok(idx)
}

impl<R: Real> Op<R> for SoftmaxCrossEntropy {
    fn kind(&self) -> &'static str {
        "softmax_loss"
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (logits_name, logits) = ctx.inputs[0];
        let (_, labels) = ctx.inputs[1];
        expect_rank(ctx.node, logits_name, logits, 2)?;
        let n = logits.shape()[0];
        let k = logits.shape()[1];
        if labels.len() != n {
            return Err(Error::Config(format!(
                "node '{}': {} logit rows from node '{}' but {} labels",
                ctx.node,
                n,
                logits_name,
                labels.len()
            )));
        }

        self.softmax.reset(&[n, k]);
        let x = logits.data();
        let soft = self.softmax.data_mut();
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let y = label_index(ctx.node, labels.data()[i], k, i)?;
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, v| f64::max(m, v.as_f64()));
            let mut denom = 0.0f64;
            for v in row {
                denom += (v.as_f64() - max).exp();
            }
            let soft_row = &mut soft[i * k..(i + 1) * k];
            for (s, v) in soft_row.iter_mut().zip(row) {
                *s = (v.as_f64() - max).exp() / denom;
            }
            total += denom.ln() - (row[y].as_f64() - max);
        }
        ctx.output.reset(&[1]);
        ctx.output.data_mut()[0] = R::from_f64(total / n as f64);
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, logits) = ctx.inputs[0];
        let (_, labels) = ctx.inputs[1];
        let n = logits.shape()[0];
        let k = logits.shape()[1];
        let scale = ctx.output_grad.data()[0].as_f64() / n as f64;
        let soft = self.softmax.data();
        let dx = ctx.input_grads[0].data_mut();
        for i in 0..n {
            let y = label_index(ctx.node, labels.data()[i], k, i)?;
            for j in 0..k {
                let onehot = if j == y { 1.0 } else { 0.0 };
                let d = (soft[i * k + j] - onehot) * scale;
                dx[i * k + j] = dx[i * k + j] + R::from_f64(d);
            }
        }
        Ok(())
    }
}

/// Mean squared error over the batch: `mean_n (pred - target)^2` for
/// `[N, 1]` predictions and targets.
pub struct L2Loss;

impl<R: Real> Op<R> for L2Loss {
    fn kind(&self) -> &'static str {
        "l2_loss"
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (pred_name, pred) = ctx.inputs[0];
        let (target_name, target) = ctx.inputs[1];
        if pred.shape() != target.shape() {
            return Err(Error::Config(format!(
                "node '{}': prediction shape {:?} from node '{pred_name}' does not match target shape {:?} from node '{target_name}'",
                ctx.node,
                pred.shape(),
                target.shape()
            )));
        }
        let n = pred.extent0();
        let mut total = 0.0f64;
        for (p, t) in pred.data().iter().zip(target.data()) {
            let d = p.as_f64() - t.as_f64();
            total += d * d;
        }
        ctx.output.reset(&[1]);
        ctx.output.data_mut()[0] = R::from_f64(total / n as f64);
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let (_, pred) = ctx.inputs[0];
        let (_, target) = ctx.inputs[1];
        let n = pred.extent0();
        let scale = R::from_f64(2.0 / n as f64) * ctx.output_grad.data()[0];
        let dx = ctx.input_grads[0].data_mut();
        for ((d, p), t) in dx.iter_mut().zip(pred.data()).zip(target.data()) {
            *d = *d + scale * (*p - *t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::seed_stream;
    use crate::test_util::random_tensor;

    fn loss_graph(op: Box<dyn crate::graph::Op<f64>>) -> Graph<f64> {
        let mut g = Graph::new();
        g.add_input("data").unwrap();
        g.add_input("labels").unwrap();
        g.add_node("loss", &["data", "labels"], op, &mut seed_stream(0, "t"))
            .unwrap();
        g.set_data_input("data").unwrap();
        g.set_label_input("labels").unwrap();
        g.set_prediction("data").unwrap();
        g.set_loss("loss").unwrap();
        g
    }

    #[test]
    fn uniform_logits_cost_ln_k_exactly() {
        let mut g = loss_graph(Box::new(SoftmaxCrossEntropy::new()));
        let logits = Tensor::filled(&[2, 3], 0.25);
        let labels = Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap();
        let loss = g.run_forward(&logits, &labels).unwrap();
        assert_eq!(loss, 3.0f64.ln());
    }

    #[test]
    fn saturated_correct_logit_is_stable() {
        let mut g = loss_graph(Box::new(SoftmaxCrossEntropy::new()));
        let logits = Tensor::from_vec(&[1, 4], vec![1000.0, 0.0, 0.0, 0.0]).unwrap();
        let labels = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let loss = g.run_forward(&logits, &labels).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = seed_stream(41, "softmax-ref");
        let logits = random_tensor(&[2, 4], &mut rng);
        let labels = Tensor::from_vec(&[2], vec![3.0, 1.0]).unwrap();
        let mut g = loss_graph(Box::new(SoftmaxCrossEntropy::new()));
        let loss = g.run_forward(&logits, &labels).unwrap();

        let mut expected = 0.0;
        for n in 0..2 {
            let row: Vec<f64> = logits.data()[n * 4..(n + 1) * 4].to_vec();
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let y = labels.data()[n] as usize;
            expected += -(row[y].exp() / denom).ln();
        }
        expected /= 2.0;
        assert!((loss - expected).abs() < 1e-6);
    }

    #[test]
    fn softmax_backward_is_softmax_minus_onehot_over_n() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.2, -0.4, 1.0, 0.0, 0.5, -0.5]).unwrap();
        let labels = Tensor::from_vec(&[2], vec![2.0, 0.0]).unwrap();
        let mut g = loss_graph(Box::new(SoftmaxCrossEntropy::new()));
        g.run_forward(&logits, &labels).unwrap();
        g.run_backward().unwrap();
        let grad = g.node_grad("data").unwrap();
        for n in 0..2 {
            let row: Vec<f64> = logits.data()[n * 3..(n + 1) * 3].to_vec();
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let y = labels.data()[n] as usize;
            for (k, logit) in row.iter().enumerate() {
                let soft = logit.exp() / denom;
                let onehot = if k == y { 1.0 } else { 0.0 };
                let expected = (soft - onehot) / 2.0;
                assert!((grad.at(&[n, k]) - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let mut g = loss_graph(Box::new(SoftmaxCrossEntropy::new()));
        let logits = Tensor::zeros(&[1, 3]);
        let labels = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let err = g.run_forward(&logits, &labels).unwrap_err();
        assert!(matches!(err, crate::error::Error::Data(_)), "{err}");
    }

    #[test]
    fn l2_zero_residual_and_constant_residual() {
        let mut g = loss_graph(Box::new(L2Loss));
        let pred = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.run_forward(&pred, &pred.clone()).unwrap(), 0.0);
        let target = Tensor::from_vec(&[3, 1], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(g.run_forward(&pred, &target).unwrap(), 4.0);
    }

    #[test]
    fn l2_matches_direct_formula_and_backward() {
        let mut rng = seed_stream(43, "l2-ref");
        let pred = random_tensor(&[4, 1], &mut rng);
        let target = random_tensor(&[4, 1], &mut rng);
        let mut g = loss_graph(Box::new(L2Loss));
        let loss = g.run_forward(&pred, &target).unwrap();
        let expected: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / 4.0;
        assert!((loss - expected).abs() < 1e-7);

        g.run_backward().unwrap();
        let grad = g.node_grad("data").unwrap();
        for ((g_v, p), t) in grad.data().iter().zip(pred.data()).zip(target.data()) {
            assert!((g_v - 2.0 * (p - t) / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_shape_mismatch_is_a_configuration_error() {
        let mut g = loss_graph(Box::new(L2Loss));
        let pred = Tensor::zeros(&[2, 1]);
        let target = Tensor::zeros(&[2, 2]);
        // run_forward's own extent check passes (2 == 2), the loss rejects
        // the column mismatch.
        let err = g.run_forward(&pred, &target).unwrap_err();
        assert!(matches!(err, crate::error::Error::Config(_)), "{err}");
    }
}
