//! Extreme regression over very large sparse label spaces.
//!
//! Labels are organized into balanced binary trees; every edge carries a
//! logistic regressor estimating the probability of descending it, so a
//! label's predicted relevance is the product of the edge probabilities on
//! its root-to-label path. Inference runs either per test point (beam search,
//! [`pointwise`]) or per label (capacity-bounded routing of a whole test set,
//! [`labelwise`]).

pub mod data;
pub mod error;
pub mod labelwise;
pub mod metrics;
pub mod model;
pub mod pointwise;
pub mod rng;
pub mod selftest;
pub mod solver;
pub mod sparse;
pub mod tail;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
