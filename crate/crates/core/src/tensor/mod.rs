//! Dense `f64` matrices and a reverse-mode differentiation tape.

mod array;
mod tape;

pub use array::Array2;
pub use tape::{sigmoid, Binary, Gradients, Tape, Unary, Var};
