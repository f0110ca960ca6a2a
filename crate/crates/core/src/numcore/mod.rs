//! Dense tensors with a reverse-mode gradient tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_extrapolated, grad_check_many};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::log_softmax_row;
