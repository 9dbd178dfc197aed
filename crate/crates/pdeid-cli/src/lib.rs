//! Experiment harness around the identification core: solvers that
//! regenerate every benchmark dataset, a text-config driver, and file
//! formats for results.

pub mod config;
pub mod datagen;
pub mod harness;
pub mod io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unstable solve: {0}")]
    UnstableSolve(String),
    #[error("identification core: {0}")]
    Core(#[from] pdeid_core::CoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
