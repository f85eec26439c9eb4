//! Refutation-agent runtime for reference-based visual anomaly detection.
//!
//! The crate is organised bottom-up: [`manifest`] and [`loader`] supply
//! items and images, [`backend`] talks to the model, [`direct`] and
//! [`agent`] produce the two branch scores, [`fusion`] blends them,
//! [`osr`] learns rules online, and [`eval`] / [`diagnostics`] analyse the
//! results.

pub mod backend;
pub mod imaging;
pub mod loader;
pub mod manifest;
pub mod prompts;
pub mod tools;
pub mod agent;
pub mod direct;
pub mod diagnostics;
pub mod eval;
pub mod fusion;
pub mod osr;
pub mod testkit;
