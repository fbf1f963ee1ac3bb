//! Incremental layer-wise self-supervised pretraining of a streaming encoder,
//! instrumented to account for every byte a training step retains.

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
mod io;
pub mod losses;
pub mod membudget;
pub mod probe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{NDArray, Scalar};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
