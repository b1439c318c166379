//! Minimal CPU neural-network toolkit: dense tensors, convolutional and
//! linear layers with explicit backward passes, and an SGD optimizer.
//!
//! Everything is generic over [`Real`] so models train in `f32` while
//! gradient checks run the identical code in `f64`.

pub mod error;
pub mod layers;
pub mod optim;
pub mod real;
pub mod seq;
pub mod tensor;

pub use error::{NnError, Result};
pub use layers::{Conv2d, Layer, Linear, Residual, Trace};
pub use optim::{Adam, Sgd};
pub use real::Real;
pub use seq::{Grads, SeqTrace, Sequential};
pub use tensor::Tensor;
