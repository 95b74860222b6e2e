//! Experiment harness for implicit feature networks: configuration,
//! dataset generation, training, reconstruction, evaluation and the
//! verification battery.

pub mod commands;
pub mod config;
pub mod verify;
