//! Latency-constrained federated learning over a shared wireless uplink:
//! device scheduling, bandwidth allocation, and a simulation harness.
//!
//! The guide in `book/` walks through each layer with runnable examples.

// Comparisons are written `!(x > 0.0)` on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod bound;
pub mod datagen;
pub mod fltrain;
pub mod harness;
pub mod numeric;
pub mod scheduler;
pub mod wireless;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/wireless.md")]
    mod wireless {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
