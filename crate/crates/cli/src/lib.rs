//! Command-line front end for the `mksd` library.

pub mod commands;
pub mod error;
pub mod ingest;
pub mod spec;
