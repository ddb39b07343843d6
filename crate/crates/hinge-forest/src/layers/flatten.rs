use crate::error::{Error, Result};
use crate::graph::{Op, OpBackward, OpForward};
use crate::real::Real;

/// Collapses all per-example extents into one: `[N, ...] -> [N, prod(...)]`.
/// Row-major storage makes this a relabeling of the same buffer.
pub struct Flatten;

impl<R: Real> Op<R> for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, ctx: OpForward<'_, R>) -> Result<()> {
        let (input_name, input) = ctx.inputs[0];
        if input.shape().is_empty() {
            return Err(Error::Config(format!(
                "node '{}': cannot flatten scalar output of node '{input_name}'",
                ctx.node
            )));
        }
        let n = input.shape()[0];
        let rest: usize = input.shape()[1..].iter().product();
        ctx.output.reset(&[n, rest]);
        ctx.output.data_mut().copy_from_slice(input.data());
        Ok(())
    }

    fn backward(&mut self, ctx: OpBackward<'_, R>) -> Result<()> {
        let g = ctx.output_grad.data();
        let dx = ctx.input_grads[0].data_mut();
        for (d, gv) in dx.iter_mut().zip(g) {
            *d = *d + *gv;
        }
        Ok(())
    }
}
