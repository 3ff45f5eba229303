//! The `dtr` command line and the HTTP service it can start.

pub mod cli;
pub mod http;
