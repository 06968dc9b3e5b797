//! Helpers shared by integration tests and the acceptance run.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;
