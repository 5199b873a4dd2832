//! Dataset files, the training/evaluation harness, report emission and the
//! `mmon` command line, built on [`mmon_core`].

pub mod cli;
pub mod dataset;
pub mod harness;
