//! Toy data, training, checkpoints, sample export and the command line
//! around `lvd-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod export;
pub mod generate;
pub mod optim;
pub mod oracle;
pub mod train;
