//! Post-integrated inference: test many outcomes for association with a
//! treatment after adjusting for latent factors estimated from negative
//! control outcomes.

pub mod data;
pub mod embedding;
pub mod error;
pub mod linalg;
pub mod nuisance;
pub mod rng;
pub mod dr;
pub mod identification;
pub mod testing;
pub mod diagnostics;
pub mod simulation;
pub mod config;
pub mod cli;
