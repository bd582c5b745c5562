//! Command-line driver for the `udad` binary: config files, run directories,
//! ablation sweeps, checkpoint evaluation and SVG scatter plots.

pub mod commands;
pub mod manifest;
pub mod svg;
