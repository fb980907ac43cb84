//! Filesystem side of the lab: PNG and manifest IO, checkpoints, run
//! configuration, synthetic benchmarks on disk, reports and the `qptlab`
//! command line. The algorithms live in `qptlab_core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod curate;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;
