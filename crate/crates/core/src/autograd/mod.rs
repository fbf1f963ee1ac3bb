//! Reverse-mode automatic differentiation with byte accounting.

mod ops;
mod param;
mod tape;

pub use ops::{SeqLayout, Window};
pub use param::{Param, ParamId, ParamKey, ParamStore};
pub use tape::{NodeId, SavedTensor, Tape, TapeBytes};
