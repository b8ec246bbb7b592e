pub mod data;
pub mod error;
pub mod eval;
pub mod frenet;
pub mod io;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod objective;
pub mod scm;
pub mod tensor;
pub mod training;
pub mod vrnn;

pub use error::{Error, Result};
