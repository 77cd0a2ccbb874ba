//! File formats, configuration, synthetic data, training loops and
//! verification commands built on `serkd-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checks;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod format;
pub mod run;
pub mod train;

pub use error::{HarnessError, Result};
