//! IO, file formats, statistics, and the command-line front-end over the
//! `dstage-core` simulator.

pub mod config;
pub mod csvout;
pub mod driver;
pub mod stats;
