//! Command-line driver and HTTP server for banditloop.

pub mod cli;
pub mod server;
