//! Versioned libraries of class-specific low-rank adaptation modules.
//!
//! Each class owns an `A` factor; all classes share one `B`. Modules are
//! committed into an on-disk library with a commit log, branched for new
//! tasks, merged with earlier versions and averaged at inference time. A toy
//! bilinear presence scorer over synthetic task streams stands in for the
//! detector so the whole pipeline runs on a desk.

pub mod bench;
pub mod error;
pub mod evalkit;
pub mod lowrank;
pub mod registry;
pub mod rng;
pub mod streamio;
pub mod taskgen;
pub mod toydetect;
pub mod trainer;

pub use error::{Error, Result};
