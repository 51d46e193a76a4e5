//! The `mailgraph` command line tool and HTTP API.

pub mod api;
pub mod cli;
