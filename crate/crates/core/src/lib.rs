//! Positive and negative sample mining for contrastive learning.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
mod io_util;
pub mod memory_bank;
pub mod network;
pub mod numerics;
pub mod pnsm;
pub mod ppsm;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/memory-bank.md")]
    struct MemoryBank;
    #[doc = include_str!("../../../book/src/weights.md")]
    struct Weights;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/negative-mining.md")]
    struct NegativeMining;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    struct Diagnostics;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    struct Reproducibility;
}
