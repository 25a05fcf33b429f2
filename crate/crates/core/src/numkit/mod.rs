//! Dense `f64` tensors, a dynamic reverse-mode tape, and seeded random streams.

mod rng;
mod tape;
mod tensor;

pub use rng::{derive_seed, normal_sample, splitmix64, RngStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
