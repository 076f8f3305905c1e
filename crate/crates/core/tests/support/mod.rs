//! Shared between this crate's integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod checks;
pub mod ref64;
