//! Batch front-end for robust crop-selection experiments.

pub mod commands;
pub mod config;
pub mod report;
pub mod synthetic;
