//! Mask-classification segmentation with a masked-attention Transformer
//! decoder, trained end to end on a small `f64` autodiff engine.

pub mod criterion;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod render;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
