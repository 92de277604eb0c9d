//! File formats, configuration and command implementations for the
//! `mmhnet` binary. The numerics live in `mmhnet-core`.

pub mod archive;
pub mod bench;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod parallel;
pub mod store;
