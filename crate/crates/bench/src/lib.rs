//! Benchmark harness around `hpn-core`: dataset files, per-instance result
//! CSVs, aggregated reports and SVG tour plots, plus the `hpn` command line.

pub mod cli;
pub mod evaluate;
pub mod report;
pub mod svg;
