//! HTTP service and command line over the reflective memory engine.

pub mod cli;
pub mod config;
pub mod server;
