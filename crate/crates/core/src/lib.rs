pub mod analysis;
pub mod bench;
pub mod distill;
pub mod error;
pub mod flow;
pub mod format;
pub mod policy;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use policy::{PolicyConfig, PolicyParams, TokenizedObservation};
pub use tensor::{DType, Rng, Scalar, Tape, Tensor, Var};
