//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the operations needed by encoder-decoder segmentation networks are
//! provided: convolutions, pooling, upsampling, group normalization, dense
//! layers, softmax and elementwise arithmetic. Everything runs on one thread
//! in a fixed order, so results are bit-reproducible.
//!
//! ```
//! use semimoe_autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, -2.0]));
//! let loss = x.square().sum();
//! let grads = tape.backward(loss);
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

#![allow(clippy::should_implement_trait)]

pub mod check;
mod conv;
pub mod gemm;
mod norm;
mod ops;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
