//! Attack-resilient primal-dual distributed resource allocation.
//!
//! A coordinator prices coupling constraints on the average allocation of `N`
//! agents; agents answer with projected gradient steps. Some uplink channels
//! may be compromised and send arbitrary messages, so the coordinator replaces
//! the naive average with a robust mean estimate and prices conservatively
//! shifted constraints. The crate provides
//!
//! - [`problem`]: utilities, constraints, feasible sets and the conservative view,
//! - [`engine`]: the attack-free iteration and a reference saddle-point solver,
//! - [`attack`]: simulated uplink channels with four adversarial strategies,
//! - [`aggregate`]: naive, median-neighborhood and filtering estimators,
//! - [`resilient`]: the resilient loop with perturbation and bound tracking,
//! - [`experiment`]: fixtures, run configuration and artifact output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod attack;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod problem;
pub mod resilient;
pub mod trace;
mod vecops;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/problem.md")]
    mod problem {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/resilient.md")]
    mod resilient {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
