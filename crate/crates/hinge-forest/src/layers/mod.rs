//! The non-forest layers: inner product, 2-D convolution, running-statistics
//! batch normalization, softmax cross-entropy, squared-error loss, and
//! per-tree output averaging.

mod aggregate;
mod batch_norm;
mod conv2d;
mod flatten;
mod inner_product;
mod loss;

pub use aggregate::{TreeMean, TreeSum};
pub use batch_norm::RunningBatchNorm;
pub use conv2d::Conv2d;
pub use flatten::Flatten;
pub use inner_product::InnerProduct;
pub use loss::{L2Loss, SoftmaxCrossEntropy};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Shape check shared by the layer forwards; errors name both nodes so graph
/// misconfigurations are attributable.
pub(crate) fn expect_rank<R: Real>(
    node: &str,
    input_name: &str,
    input: &Tensor<R>,
    rank: usize,
) -> Result<()> {
    if input.shape().len() != rank {
        return Err(Error::Config(format!(
            "node '{node}' expects rank-{rank} input, got shape {:?} from node '{input_name}'",
            input.shape()
        )));
    }
    Ok(())
}
