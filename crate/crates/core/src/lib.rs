//! Duplicate detection and preservative deduplication for labeled face image
//! datasets, plus the verification and quality evaluation used to measure the
//! effect of deduplication.

pub mod align;
pub mod corpus;
pub mod dedup;
pub mod error;
pub mod eval;
pub mod features;
pub mod hashing;
pub mod pipeline;
pub mod unionfind;

pub use error::{Error, Result};
