//! Command-line front end for the prompt optimizer.

pub mod commands;
pub mod config;
