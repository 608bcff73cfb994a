//! Command-line pipeline and HTTP server around the `ci-retrieval` engine.

pub mod cli;
pub mod server;
