//! Library surface of the command-line harness: experiment configuration
//! and orchestration, shared by the `pluto` binary and the test suites.

pub mod config;
pub mod experiment;
pub mod verify;
