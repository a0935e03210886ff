//! HTTP API, job records and command line for the forgedit workbench.

pub mod api;
pub mod cli;
pub mod config;
pub mod jobs;
