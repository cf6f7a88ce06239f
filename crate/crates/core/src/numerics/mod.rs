//! Dense tensors, a reverse-mode gradient tape, stable loss primitives,
//! the AdamW optimizer and deterministic random number generation.
//!
//! Everything here is generic over [`Scalar`]; the crate root exports the
//! `f64` aliases the rest of the pipeline uses.

pub mod gradcheck;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use optim::{AdamW, OptimizerState};
pub use rng::Rng;
pub use tape::{Gradients, Tape, TensorId};
pub use tensor::{read_tensor_chunk, write_tensor_chunk, Tensor};

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the tensor and tape machinery.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
}

/// Logistic function, computed without overflowing exp for large |z|.
pub fn sigmoid<F: Scalar>(z: F) -> F {
    let one = F::one();
    if z >= F::zero() {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    }
}

/// Binary cross entropy directly on a logit, in the stable form
/// `max(z, 0) - z*y + log(1 + exp(-|z|))`.
///
/// Equals `-[y*log(sigmoid(z)) + (1-y)*log(1 - sigmoid(z))]` but stays
/// finite for any finite logit. The derivative in `z` is `sigmoid(z) - y`.
pub fn bce_with_logits<F: Scalar>(logit: F, target: F) -> F {
    let zero = F::zero();
    logit.max(zero) - logit * target + (-logit.abs()).exp().ln_1p()
}
