//! Command line front end and HTTP service for the grid broker.

pub mod cli;
pub mod service;
