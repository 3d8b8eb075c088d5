//! IO, file formats, plots, and command drivers around the numeric core.

pub mod audit;
pub mod cli;
pub mod config;
pub mod files;
pub mod plot;
pub mod runs;
