//! Safe-set projections for reinforcement learning, with policy gradients
//! that account for the projection.
//!
//! See the guide in `book/` for a walk-through.

// `!(a > b)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod critic;
pub mod env;
pub mod error;
pub mod harness;
pub mod opt_kernel;
pub mod policy_grad;
pub mod projection;
pub mod q_safe;
pub mod safe_set;
pub mod tube_mpc;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/projection.md")]
    mod projection {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/critics.md")]
    mod critics {}
    #[doc = include_str!("../../../book/src/q_safe.md")]
    mod q_safe {}
    #[doc = include_str!("../../../book/src/tube_mpc.md")]
    mod tube_mpc {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
