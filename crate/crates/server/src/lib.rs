//! Command-line entry points and the HTTP JSON service around a trained
//! prototype-grounded concept model.

pub mod cli;
pub mod error;
pub mod journal;
pub mod service;
pub mod wire;
