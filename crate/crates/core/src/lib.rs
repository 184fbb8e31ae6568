//! Lottery-ticket pruning engine.
//!
//! Modules build on each other bottom-up: [`nn`] trains small conv/dense
//! networks deterministically, [`masking`] keeps pruned weights at zero,
//! [`pruning`] implements iterative magnitude pruning with rewinding,
//! [`earlybird`] extracts tickets from mask stabilisation, [`transfer`]
//! moves tickets and masks between tasks, [`metrics`] does sparsity, MAC and
//! checkpoint accounting, and [`tasks`] provides the synthetic shapes
//! benchmark. [`train`] holds the deterministic masked training loop.

pub mod earlybird;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod tasks;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
