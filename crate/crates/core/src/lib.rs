//! Planning core for synthetic single-target cranial radiosurgery.
//!
//! The crate covers the whole pipeline: synthetic cases ([`case`]), an
//! analytic dose engine ([`dose`]), an objective-driven beam-weight optimizer
//! ([`optimizer`]), plan metrics and clinical goals ([`evaluator`]), the
//! policy-driven planning loop ([`agent`]), reasoning-trace analysis
//! ([`traces`]), paired statistics ([`stats`]) and the human review state
//! machine ([`review`]).

// `!(x > 0.0)` guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod case;
pub mod dose;
pub mod evaluator;
pub mod geom;
pub mod optimizer;
pub mod review;
pub mod stats;
pub mod traces;
