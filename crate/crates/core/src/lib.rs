//! Prototype-grounded concept models: a from-scratch tensor substrate, the
//! GlyphSum dataset, training, interventions and evaluation.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod eval;
pub mod interventions;
pub mod model;
pub mod tensor;
pub mod training;
