//! Library side of the experiment runner, shared by the binary and the
//! acceptance tests.

pub mod config;
pub mod experiment;
