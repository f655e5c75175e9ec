//! Concurrency-aware speculative decoding with online draft learning inside
//! a group-relative policy optimization loop, on toy models.

pub mod drafttree;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod optim;
pub mod roofline;
pub mod scheduler;
pub mod tinylm;

pub use error::{Error, Result};
