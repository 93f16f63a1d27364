//! File formats, synthetic data and the training demo behind the `scaresnet`
//! command-line tool.

pub mod config;
pub mod io;
pub mod synth;
pub mod train;
