//! Command-line tool and HTTP service around the `anchor-edit` sampler.

pub mod cli;
pub mod server;
