//! Command-line companion to the core library: dataset synthesis and
//! masking, training, evaluation, gradient checking, and hyperparameter
//! sweeps, all writing plot-ready CSV and binary tensor containers.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod errors;
pub mod pumt;
pub mod reports;
