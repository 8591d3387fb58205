//! Minimal dense `f64` numerics with reverse-mode differentiation.
//!
//! Only the operations needed by a pooled-embedding LSTM classifier are
//! provided: matrix products, elementwise arithmetic, concatenation and
//! slicing, sigmoid/tanh, embedding gathers, inverted dropout and binary
//! cross-entropy. Gradients are computed over an explicit [`Tape`] rebuilt
//! for every example, verified by [`gradcheck`], and consumed by [`Adam`].
//!
//! ```
//! use ndiff::{Grads, ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::row(vec![1.0, -2.0]));
//! let mut tape = Tape::new(&store);
//! let x = tape.param(w);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let mut grads = Grads::zeros_like(&store);
//! tape.backward(loss, &mut grads).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, -4.0]);
//! ```

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod lstm;
mod params;
pub mod suite;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use lstm::{lstm_cell, LstmVars};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{bce_grad, bce_loss, sigmoid, Tape, Var, BCE_EPS};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
