//! Nurse review service over a pipeline data directory, plus the `hapi` CLI.

pub mod api;
pub mod cli;
pub mod service;
pub mod store;
