//! Command-line front end and HTTP API for `attention-lens`.

pub mod cli;
pub mod config;
pub mod fixture;
pub mod lenses;
pub mod server;
